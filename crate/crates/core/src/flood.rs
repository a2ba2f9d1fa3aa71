//! The governmental budget-allocation instance: CRRA consumption utility,
//! capital dynamics driven by relative losses, a loaded insurance premium
//! and a terminal capital utility.
//!
//! Per decision epoch t the government splits the budget `B_t = alpha S_t`
//! between investment x_t, consumption c_t and insurance z_t:
//!
//! ```text
//! max E[ (1-beta) sum_t rho^(-t) u(c_t) + beta rho^(-T) u(S_T) ]
//! s.t. x_t + c_t + premium(E xi_{t+1}) z_t <= alpha S_t,   x, c, z >= 0,
//!      S_{t+1} = [(1-delta) S_t + x_t](1 - xi_{t+1}) + z_t xi_{t+1},
//! ```
//!
//! with `u(c) = c^(1-gamma)/(1-gamma)` (log at gamma = 1) and the premium
//! `(1+V) E(xi)` taken over the node's discrete children. The stage solver
//! works in the reduced coordinates (x, z) with consumption as the budget
//! slack, which keeps the subproblem two-dimensional and concave.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{
    backward_solve, forward_evaluate, DpError, FitSpec, NodeCtx, Orientation, PolicySolution,
    Polytope, Sense, StageModel, TrajectorySet, VfForm,
};
use crate::tree::ScenarioTree;

#[derive(Debug, Error)]
pub enum FloodError {
    #[error("invalid configuration: {what}")]
    Config { what: String },
    #[error("exposure misconfigured: {clamped} of {total} node losses clamped to [0, 1)")]
    ExposureMisconfigured { clamped: usize, total: usize },
    #[error(transparent)]
    Dp(#[from] DpError),
}

/// All constants of the budget-allocation problem plus the run plumbing
/// carried by the flat config file.
///
/// The shipped defaults for (alpha, beta, delta, rho, gamma, load) are
/// implementer choices for a plausible mid-size economy and carry no claim
/// of matching any published calibration; acceptance fixtures pin their own
/// constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloodModelConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub rho: f64,
    pub gamma: f64,
    /// Insurance load V.
    pub load: f64,
    pub s0: f64,
    pub stages: usize,
    pub pnl: f64,
    /// Divisor converting absolute losses to relative ones.
    pub exposure: f64,
    pub seed: u64,
    /// Trajectory count K.
    pub trajectories: usize,
    pub branchiness: Vec<usize>,
}

impl Default for FloodModelConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.5,
            delta: 0.05,
            rho: 1.0,
            gamma: 0.5,
            load: 0.05,
            s0: 322.56,
            stages: 3,
            pnl: 0.6779,
            exposure: 100.0,
            seed: 7,
            trajectories: 64,
            branchiness: vec![4, 4, 4],
        }
    }
}

impl FloodModelConfig {
    pub fn check(&self) -> Result<(), FloodError> {
        let unit = |v: f64, name: &str| -> Result<(), FloodError> {
            if !(0.0..=1.0).contains(&v) {
                return Err(FloodError::Config {
                    what: format!("{name} = {v} outside [0,1]"),
                });
            }
            Ok(())
        };
        unit(self.alpha, "alpha")?;
        unit(self.beta, "beta")?;
        unit(self.delta, "delta")?;
        unit(self.gamma, "gamma")?;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(FloodError::Config {
                what: format!("rho = {} outside (0,1]", self.rho),
            });
        }
        if self.load < 0.0 {
            return Err(FloodError::Config {
                what: format!("load = {} must be nonnegative", self.load),
            });
        }
        if self.s0 <= 0.0 {
            return Err(FloodError::Config {
                what: format!("s0 = {} must be positive", self.s0),
            });
        }
        if self.stages == 0 {
            return Err(FloodError::Config {
                what: "stages must be at least 1".into(),
            });
        }
        if !(self.pnl > 0.0 && self.pnl < 1.0) {
            return Err(FloodError::Config {
                what: format!("pnl = {} outside (0,1)", self.pnl),
            });
        }
        if self.exposure <= 0.0 {
            return Err(FloodError::Config {
                what: format!("exposure = {} must be positive", self.exposure),
            });
        }
        if self.trajectories < 2 {
            return Err(FloodError::Config {
                what: "trajectories must be at least 2".into(),
            });
        }
        Ok(())
    }
}

/// CRRA utility `c^(1-gamma)/(1-gamma)`; the logarithm at gamma = 1, where
/// u(0) degenerates to the negative-infinity sentinel.
pub fn utility(c: f64, gamma: f64) -> f64 {
    debug_assert!(c >= 0.0, "utility expects nonnegative consumption");
    if gamma == 1.0 {
        if c == 0.0 {
            return f64::NEG_INFINITY;
        }
        return c.ln();
    }
    if c == 0.0 {
        return 0.0;
    }
    c.powf(1.0 - gamma) / (1.0 - gamma)
}

fn utility_prime(c: f64, gamma: f64) -> f64 {
    let c = c.max(1e-300);
    if gamma == 1.0 {
        1.0 / c
    } else {
        c.powf(-gamma)
    }
}

/// Loaded premium `(1 + V) mean_loss`.
pub fn premium(mean_loss: f64, load: f64) -> f64 {
    debug_assert!(mean_loss >= 0.0);
    (1.0 + load) * mean_loss
}

/// Capital dynamics `[(1-delta) S + x](1 - xi) + z xi`; linear and
/// componentwise increasing in (S, x, z).
pub fn transition(s: f64, x: f64, z: f64, xi: f64, delta: f64) -> f64 {
    ((1.0 - delta) * s + x) * (1.0 - xi) + z * xi
}

/// Stage model of the budget-allocation problem over a fixed scenario tree.
#[derive(Debug, Clone)]
pub struct FloodModel {
    cfg: FloodModelConfig,
    /// Nodes whose relative loss hit the [0, 1) clamp.
    pub clamped: usize,
    pub total_nodes: usize,
}

const LOSS_CAP: f64 = 1.0 - 1e-9;

impl FloodModel {
    pub fn config(&self) -> &FloodModelConfig {
        &self.cfg
    }

    fn relative_loss(&self, raw: f64) -> f64 {
        (raw / self.cfg.exposure).clamp(0.0, LOSS_CAP)
    }
}

/// Builds the stage model for a tree, converting absolute node values to
/// relative losses through the exposure divisor. More than 5% of nodes
/// hitting the [0, 1) clamp signals a misconfigured exposure.
pub fn build_model(config: &FloodModelConfig, tree: &ScenarioTree) -> Result<FloodModel, FloodError> {
    config.check()?;
    if config.stages != tree.stages {
        return Err(FloodError::Config {
            what: format!("config stages {} vs tree stages {}", config.stages, tree.stages),
        });
    }
    let total = tree.nodes.len();
    let clamped = tree
        .nodes
        .iter()
        .filter(|n| {
            let rel = n.value / config.exposure;
            !(0.0..=LOSS_CAP).contains(&rel)
        })
        .count();
    if clamped * 20 > total {
        return Err(FloodError::ExposureMisconfigured { clamped, total });
    }
    Ok(FloodModel {
        cfg: config.clone(),
        clamped,
        total_nodes: total,
    })
}

impl StageModel for FloodModel {
    fn stages(&self) -> usize {
        self.cfg.stages
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn solver_dim(&self) -> usize {
        2
    }

    fn decision_dim(&self) -> usize {
        3
    }

    fn sense(&self) -> Sense {
        Sense::Maximize
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![self.cfg.s0]
    }

    fn map_loss(&self, raw_value: f64) -> f64 {
        self.relative_loss(raw_value)
    }

    fn reward(&self, t: usize, s: &[f64], x: &[f64], _xi: f64, ctx: &NodeCtx) -> f64 {
        let budget = self.cfg.alpha * s[0];
        let pi = premium(ctx.mean_next_loss, self.cfg.load);
        let c = (budget - x[0] - pi * x[1]).max(0.0);
        (1.0 - self.cfg.beta) * self.cfg.rho.powi(-(t as i32)) * utility(c, self.cfg.gamma)
    }

    fn reward_grad(&self, t: usize, s: &[f64], x: &[f64], _xi: f64, ctx: &NodeCtx) -> Vec<f64> {
        let budget = self.cfg.alpha * s[0];
        let pi = premium(ctx.mean_next_loss, self.cfg.load);
        let c = (budget - x[0] - pi * x[1]).max(0.0);
        let w = (1.0 - self.cfg.beta) * self.cfg.rho.powi(-(t as i32)) * utility_prime(c, self.cfg.gamma);
        vec![-w, -w * pi]
    }

    fn transition(&self, _t: usize, s: &[f64], x: &[f64], xi_next: f64) -> Vec<f64> {
        vec![transition(s[0], x[0], x[1], xi_next, self.cfg.delta)]
    }

    fn transition_jac(&self, _t: usize, _s: &[f64], _x: &[f64], xi_next: f64) -> Vec<f64> {
        vec![1.0 - xi_next, xi_next]
    }

    fn terminal(&self, s: &[f64]) -> f64 {
        self.cfg.beta * self.cfg.rho.powi(-(self.cfg.stages as i32)) * utility(s[0].max(0.0), self.cfg.gamma)
    }

    fn terminal_grad(&self, s: &[f64]) -> Vec<f64> {
        vec![self.cfg.beta * self.cfg.rho.powi(-(self.cfg.stages as i32)) * utility_prime(s[0], self.cfg.gamma)]
    }

    fn feasible(&self, _t: usize, s: &[f64], ctx: &NodeCtx) -> Polytope {
        Polytope {
            weights: vec![1.0, premium(ctx.mean_next_loss, self.cfg.load)],
            capacity: self.cfg.alpha * s[0],
        }
    }

    fn expand_decisions(&self, _t: usize, s: &[f64], x: &[f64], ctx: &NodeCtx) -> Vec<f64> {
        let budget = self.cfg.alpha * s[0];
        let pi = premium(ctx.mean_next_loss, self.cfg.load);
        let c = (budget - x[0] - pi * x[1]).max(0.0);
        vec![x[0], c, x[1]]
    }
}

/// Fit settings matching the maximization: concave-increasing quadratics.
pub fn flood_fit_spec() -> FitSpec {
    FitSpec {
        form: VfForm::Quadratic,
        orientation: Orientation::ConcaveIncreasing,
    }
}

/// One row of the realized-policy table.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyRow {
    /// Decision epoch (0 = root).
    pub stage: usize,
    /// Tree node holding the decision; None at the root.
    pub node: Option<usize>,
    /// Capital at which the decision was taken.
    pub state: f64,
    pub investment: f64,
    pub consumption: f64,
    pub insurance: f64,
    pub value: f64,
    /// Probability of reaching the decision point.
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyTable {
    pub rows: Vec<PolicyRow>,
}

/// Realized-state policy table via a forward pass: per visited node the
/// stage subproblem is re-solved at the state actually reached.
pub fn policy_table(
    model: &FloodModel,
    tree: &ScenarioTree,
    policy: &PolicySolution,
) -> Result<PolicyTable, FloodError> {
    let outcomes = forward_evaluate(model, tree, policy)?;
    let mut rows: std::collections::BTreeMap<Option<usize>, PolicyRow> = std::collections::BTreeMap::new();
    rows.insert(
        None,
        PolicyRow {
            stage: 0,
            node: None,
            state: model.cfg.s0,
            investment: policy.root_decisions[0],
            consumption: policy.root_decisions[1],
            insurance: policy.root_decisions[2],
            value: policy.root_value,
            probability: 1.0,
        },
    );
    for o in &outcomes {
        // decision epochs 1..T-1 happen at the interior nodes of the path
        for (k, &node) in o.nodes.iter().enumerate() {
            if k + 1 >= o.decisions.len() {
                break;
            }
            let dec = &o.decisions[k + 1];
            rows.entry(Some(node)).or_insert_with(|| PolicyRow {
                stage: k + 1,
                node: Some(node),
                state: o.states[k][0],
                investment: dec[0],
                consumption: dec[1],
                insurance: dec[2],
                value: o.values[k + 1],
                probability: tree.path_probability(node).unwrap_or(0.0),
            });
        }
    }
    Ok(PolicyTable {
        rows: rows.into_values().collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CapitalRow {
    pub capital: f64,
    pub probability: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CapitalDistribution {
    pub rows: Vec<CapitalRow>,
}

/// Terminal-capital distribution under the solved policy: a forward pass
/// over all tree paths with the per-path probabilities of the quantizer —
/// sorted ascending with cumulative probabilities.
pub fn capital_distribution(
    model: &FloodModel,
    tree: &ScenarioTree,
    policy: &PolicySolution,
) -> Result<CapitalDistribution, FloodError> {
    let outcomes = forward_evaluate(model, tree, policy)?;
    let mut pairs: Vec<(f64, f64)> = outcomes
        .iter()
        .map(|o| (o.states.last().unwrap()[0], o.probability))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rows = Vec::with_capacity(pairs.len());
    let mut cum = 0.0;
    for (capital, probability) in pairs {
        cum += probability;
        rows.push(CapitalRow {
            capital,
            probability,
            cumulative: cum,
        });
    }
    Ok(CapitalDistribution { rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct LoadRow {
    pub load: f64,
    pub value: f64,
    /// Probability-weighted mean investment per decision epoch.
    pub mean_investment: Vec<f64>,
    /// Probability-weighted mean insurance per decision epoch.
    pub mean_insurance: Vec<f64>,
}

/// Re-solves the instance per insurance load; emits plot-ready rows.
pub fn load_sweep(
    config: &FloodModelConfig,
    tree: &ScenarioTree,
    trajectories: &TrajectorySet,
    loads: &[f64],
) -> Result<Vec<LoadRow>, FloodError> {
    if loads.is_empty() {
        return Err(FloodError::Config {
            what: "load list must be nonempty".into(),
        });
    }
    let mut rows = Vec::with_capacity(loads.len());
    for &load in loads {
        let mut cfg = config.clone();
        cfg.load = load;
        let model = build_model(&cfg, tree)?;
        let policy = backward_solve(&model, tree, trajectories, &flood_fit_spec())?;
        let table = policy_table(&model, tree, &policy)?;
        let epochs = config.stages;
        let mut wx = vec![0.0; epochs];
        let mut wz = vec![0.0; epochs];
        let mut wp = vec![0.0; epochs];
        for r in &table.rows {
            if r.stage < epochs {
                wx[r.stage] += r.probability * r.investment;
                wz[r.stage] += r.probability * r.insurance;
                wp[r.stage] += r.probability;
            }
        }
        for t in 0..epochs {
            if wp[t] > 0.0 {
                wx[t] /= wp[t];
                wz[t] /= wp[t];
            }
        }
        rows.push(LoadRow {
            load,
            value: policy.root_value,
            mean_investment: wx,
            mean_insurance: wz,
        });
    }
    Ok(rows)
}
