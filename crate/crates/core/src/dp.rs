//! Backward dynamic programming with shape-constrained value functions.
//!
//! The engine walks a scenario tree from the horizon to the root. Leaf
//! values are the model terminal function evaluated on the sampled state
//! trajectories; each interior node solves, per trajectory point, a stage
//! subproblem whose continuation is either the exact terminal function (for
//! children at the horizon) or a quadratic/linear value function fitted over
//! the trajectory points of the child node. Convexity/monotonicity of the
//! fitted functions is enforced as constraints so the stage subproblems stay
//! globally solvable; the fitted orientation mirrors the optimization sense.
//!
//! Stage subproblems are reduced by the model to a low-dimensional concave
//! (or convex) program over `{x >= 0, w'x <= cap}` and solved by projected
//! gradient ascent with backtracking line search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::robust::{worst_case_weights, AmbiguitySet, RobustError};
use crate::tree::ScenarioTree;
use crate::util::{jacobi_eigen, solve_dense, solve_sym_pinv};

#[derive(Debug, Error)]
pub enum DpError {
    #[error("insufficient fit points: need {need}, got {got}")]
    InsufficientPoints { need: usize, got: usize },
    #[error("subproblem infeasible at stage {stage}: capacity {capacity} < 0")]
    Infeasible { stage: usize, capacity: f64 },
    #[error("subproblem unbounded at stage {stage}")]
    Unbounded { stage: usize },
    #[error("model/tree mismatch: {what}")]
    Mismatch { what: String },
    #[error("model does not declare degree-1 homogeneity in the scenario variable")]
    NotHomogeneous,
    #[error("robust inner solve failed: {0}")]
    Robust(#[from] RobustError),
    #[error("invalid input: {what}")]
    Input { what: String },
}

/// Optimization sense of a stage model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Shape constraints a fitted value function must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// A positive semidefinite, gradient nonnegative at the samples.
    ConvexIncreasing,
    /// -A positive semidefinite, gradient nonnegative at the samples.
    ConcaveIncreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VfForm {
    Linear,
    Quadratic,
}

/// Quadratic approximation `V(s) = s'A s + 2 b's + c` under shape
/// constraints, or the unconstrained linear form `V(s) = b's + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub form: VfForm,
    pub orientation: Orientation,
    pub state_dim: usize,
    /// Row-major symmetric matrix, `state_dim^2` entries; empty when linear.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl ValueFunction {
    pub fn evaluate(&self, s: &[f64]) -> f64 {
        let r = self.state_dim;
        let mut v = self.c;
        match self.form {
            VfForm::Linear => {
                for i in 0..r {
                    v += self.b[i] * s[i];
                }
            }
            VfForm::Quadratic => {
                for i in 0..r {
                    v += 2.0 * self.b[i] * s[i];
                    for j in 0..r {
                        v += s[i] * self.a[i * r + j] * s[j];
                    }
                }
            }
        }
        v
    }

    pub fn gradient(&self, s: &[f64]) -> Vec<f64> {
        let r = self.state_dim;
        let mut g = vec![0.0; r];
        match self.form {
            VfForm::Linear => {
                g.copy_from_slice(&self.b);
            }
            VfForm::Quadratic => {
                for i in 0..r {
                    g[i] = 2.0 * self.b[i];
                    for j in 0..r {
                        g[i] += 2.0 * self.a[i * r + j] * s[j];
                    }
                }
            }
        }
        g
    }

    /// Smallest orientation-signed eigenvalue of A (min eig for convex,
    /// min eig of -A for concave); linear forms return 0.
    pub fn signed_min_eigenvalue(&self) -> f64 {
        if self.form == VfForm::Linear || self.state_dim == 0 {
            return 0.0;
        }
        let signed: Vec<f64> = match self.orientation {
            Orientation::ConvexIncreasing => self.a.clone(),
            Orientation::ConcaveIncreasing => self.a.iter().map(|x| -x).collect(),
        };
        let (vals, _) = jacobi_eigen(&signed, self.state_dim);
        vals.into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Most negative value of A s + b over the given sample states
    /// (nonnegative when the monotonicity constraints hold).
    pub fn monotonicity_margin(&self, samples: &[Vec<f64>]) -> f64 {
        let r = self.state_dim;
        let mut worst = f64::INFINITY;
        for s in samples {
            for i in 0..r {
                let mut g = self.b[i];
                if self.form == VfForm::Quadratic {
                    for j in 0..r {
                        g += self.a[i * r + j] * s[j];
                    }
                }
                worst = worst.min(g);
            }
        }
        worst
    }
}

/// Result of a value-function fit with the residuals needed by the
/// optimality checks.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub vf: ValueFunction,
    /// Constrained sum of squared residuals.
    pub residual: f64,
    /// Unconstrained least-squares residual (lower bound).
    pub unconstrained_residual: f64,
    /// Whether any shape constraint is active at the solution.
    pub constraints_active: bool,
    /// Whether the normal equations were rank-deficient (pseudo-inverse
    /// fallback used).
    pub rank_deficient: bool,
}

fn features(s: &[f64], form: VfForm) -> Vec<f64> {
    let r = s.len();
    let mut f = Vec::new();
    let linear_scale = match form {
        VfForm::Linear => 1.0,
        VfForm::Quadratic => 2.0,
    };
    if form == VfForm::Quadratic {
        for i in 0..r {
            for j in i..r {
                let scale = if i == j { 1.0 } else { 2.0 };
                f.push(scale * s[i] * s[j]);
            }
        }
    }
    for &si in s {
        f.push(linear_scale * si);
    }
    f.push(1.0);
    f
}

fn unpack(theta: &[f64], r: usize, form: VfForm, orientation: Orientation) -> ValueFunction {
    let mut a = Vec::new();
    let mut idx = 0;
    if form == VfForm::Quadratic {
        a = vec![0.0; r * r];
        for i in 0..r {
            for j in i..r {
                a[i * r + j] = theta[idx];
                a[j * r + i] = theta[idx];
                idx += 1;
            }
        }
    }
    let b = theta[idx..idx + r].to_vec();
    let c = theta[idx + r];
    ValueFunction {
        form,
        orientation,
        state_dim: r,
        a,
        b,
        c,
    }
}

fn residual_sum(points: &[(Vec<f64>, f64)], vf: &ValueFunction) -> f64 {
    points
        .iter()
        .map(|(s, v)| {
            let e = vf.evaluate(s) - v;
            e * e
        })
        .sum()
}

fn satisfies_constraints(vf: &ValueFunction, samples: &[Vec<f64>]) -> bool {
    vf.signed_min_eigenvalue() >= -1e-9 && vf.monotonicity_margin(samples) >= -1e-9
}

/// Least-squares fit of a linear or shape-constrained quadratic value
/// function to (state, value) points.
///
/// The unconstrained least-squares solution is computed first; when it
/// already satisfies the orientation constraints it is returned as is. For
/// scalar states the constrained problem is a three-variable quadratic
/// program solved exactly by active-set enumeration; higher dimensions run
/// projected gradient descent with eigenvalue clipping onto the
/// semidefinite cone and componentwise repair of the sample-gradient
/// constraints.
pub fn fit_value_function(
    points: &[(Vec<f64>, f64)],
    form: VfForm,
    orientation: Orientation,
) -> Result<FitResult, DpError> {
    if points.is_empty() {
        return Err(DpError::InsufficientPoints { need: 2, got: 0 });
    }
    let r = points[0].0.len();
    let need = match form {
        VfForm::Linear => 2,
        VfForm::Quadratic => r + 2,
    };
    if points.len() < need {
        return Err(DpError::InsufficientPoints {
            need,
            got: points.len(),
        });
    }
    let dim = match form {
        VfForm::Linear => r + 1,
        VfForm::Quadratic => r * (r + 1) / 2 + r + 1,
    };
    // normal equations
    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for (s, v) in points {
        let f = features(s, form);
        for i in 0..dim {
            rhs[i] += f[i] * v;
            for j in 0..dim {
                gram[i * dim + j] += f[i] * f[j];
            }
        }
    }
    let gram_rows: Vec<Vec<f64>> = (0..dim)
        .map(|i| gram[i * dim..(i + 1) * dim].to_vec())
        .collect();
    let (theta0, rank_deficient) = match solve_dense(&gram_rows, &rhs) {
        Some(x) => (x, false),
        None => {
            let (x, _) = solve_sym_pinv(&gram, &rhs, dim, 1e-12);
            (x, true)
        }
    };
    let samples: Vec<Vec<f64>> = points.iter().map(|(s, _)| s.clone()).collect();
    let vf0 = unpack(&theta0, r, form, orientation);
    let unconstrained_residual = residual_sum(points, &vf0);
    if form == VfForm::Linear || satisfies_constraints(&vf0, &samples) {
        return Ok(FitResult {
            vf: vf0,
            residual: unconstrained_residual,
            unconstrained_residual,
            constraints_active: false,
            rank_deficient,
        });
    }
    let vf = if r == 1 {
        fit_scalar_constrained(points, orientation)
    } else {
        fit_projected_gradient(points, &gram, &rhs, dim, r, orientation)
    };
    let residual = residual_sum(points, &vf);
    Ok(FitResult {
        vf,
        residual,
        unconstrained_residual,
        constraints_active: true,
        rank_deficient,
    })
}

/// Exact active-set solve of the scalar constrained fit.
///
/// For scalar states the sample-gradient constraints reduce to a single
/// binding inequality (at the largest sample for concave, the smallest for
/// convex orientation) next to the sign constraint on the curvature, so all
/// active sets can be enumerated.
fn fit_scalar_constrained(points: &[(Vec<f64>, f64)], orientation: Orientation) -> ValueFunction {
    let xs: Vec<f64> = points.iter().map(|(s, _)| s[0]).collect();
    let vs: Vec<f64> = points.iter().map(|(_, v)| *v).collect();
    let s_bind = match orientation {
        Orientation::ConvexIncreasing => xs.iter().cloned().fold(f64::INFINITY, f64::min),
        Orientation::ConcaveIncreasing => xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    let sign = match orientation {
        Orientation::ConvexIncreasing => 1.0,
        Orientation::ConcaveIncreasing => -1.0,
    };
    let feasible = |a: f64, b: f64| sign * a >= -1e-12 && a * s_bind + b >= -1e-12;
    let sse = |a: f64, b: f64, c: f64| -> f64 {
        xs.iter()
            .zip(&vs)
            .map(|(&x, &v)| {
                let e = a * x * x + 2.0 * b * x + c - v;
                e * e
            })
            .sum()
    };
    let mut best: Option<(f64, (f64, f64, f64))> = None;
    let mut consider = |cand: Option<(f64, f64, f64)>| {
        if let Some((a, b, c)) = cand {
            if feasible(a, b) {
                let val = sse(a, b, c);
                if best.is_none() || val < best.unwrap().0 - 1e-15 {
                    best = Some((val, (a, b, c)));
                }
            }
        }
    };

    // moments for the small normal systems
    let n = xs.len() as f64;
    let m = |p: u32| -> f64 { xs.iter().map(|x| x.powi(p as i32)).sum() };
    let my = |p: u32| -> f64 { xs.iter().zip(&vs).map(|(x, y)| x.powi(p as i32) * y).sum() };

    // active: curvature pinned to zero -> affine fit
    consider(
        solve_dense(
            &[vec![m(2) * 4.0, 2.0 * m(1)], vec![2.0 * m(1), n]],
            &[2.0 * my(1), my(0)],
        )
        .map(|x| (0.0, x[0], x[1])),
    );
    // active: gradient pinned at the binding sample, b = -a s_bind
    {
        // substitute b: features become x^2 - 2 s_bind x and 1
        let f1: Vec<f64> = xs.iter().map(|&x| x * x - 2.0 * s_bind * x).collect();
        let s11: f64 = f1.iter().map(|f| f * f).sum();
        let s1c: f64 = f1.iter().sum();
        let s1y: f64 = f1.iter().zip(&vs).map(|(f, y)| f * y).sum();
        consider(
            solve_dense(&[vec![s11, s1c], vec![s1c, n]], &[s1y, my(0)])
                .map(|x| (x[0], -x[0] * s_bind, x[1])),
        );
    }
    // both active: a = 0 and b = 0 -> constant
    consider(Some((0.0, 0.0, my(0) / n)));

    let (_, (a, b, c)) = best.expect("constant fit is always feasible");
    ValueFunction {
        form: VfForm::Quadratic,
        orientation,
        state_dim: 1,
        a: vec![a],
        b: vec![b],
        c,
    }
}

/// Projected gradient descent for state dimension >= 2: gradient steps on
/// the least-squares objective, eigenvalue clipping of A onto the signed
/// semidefinite cone, then componentwise lifting of b to restore
/// `A s + b >= 0` at the samples.
fn fit_projected_gradient(
    points: &[(Vec<f64>, f64)],
    gram: &[f64],
    rhs: &[f64],
    dim: usize,
    r: usize,
    orientation: Orientation,
) -> ValueFunction {
    let samples: Vec<Vec<f64>> = points.iter().map(|(s, _)| s.clone()).collect();
    let project = |theta: &mut Vec<f64>| {
        let mut vf = unpack(theta, r, VfForm::Quadratic, orientation);
        // clip the curvature spectrum to the orientation sign
        let (vals, vecs) = jacobi_eigen(&vf.a, r);
        let mut a = vec![0.0; r * r];
        for k in 0..r {
            let lam = match orientation {
                Orientation::ConvexIncreasing => vals[k].max(0.0),
                Orientation::ConcaveIncreasing => vals[k].min(0.0),
            };
            for i in 0..r {
                for j in 0..r {
                    a[i * r + j] += lam * vecs[i * r + k] * vecs[j * r + k];
                }
            }
        }
        vf.a = a;
        // lift b so the gradient is nonnegative at every sample
        for i in 0..r {
            let mut min_as = f64::INFINITY;
            for s in &samples {
                let mut g = 0.0;
                for j in 0..r {
                    g += vf.a[i * r + j] * s[j];
                }
                min_as = min_as.min(g);
            }
            if vf.b[i] < -min_as {
                vf.b[i] = -min_as;
            }
        }
        // repack
        let mut idx = 0;
        for i in 0..r {
            for j in i..r {
                theta[idx] = vf.a[i * r + j];
                idx += 1;
            }
        }
        for i in 0..r {
            theta[idx] = vf.b[i];
            idx += 1;
        }
        theta[idx] = vf.c;
    };

    // Lipschitz constant of the quadratic objective gradient
    let (eigs, _) = jacobi_eigen(gram, dim);
    let lip = 2.0 * eigs.into_iter().fold(0.0_f64, f64::max).max(1e-12);
    let step = 1.0 / lip;
    let mut theta = vec![0.0; dim];
    project(&mut theta);
    let mut prev = f64::INFINITY;
    for _ in 0..200_000 {
        // gradient of sum (f'theta - v)^2 = 2 (G theta - rhs)
        let mut grad = vec![0.0; dim];
        for i in 0..dim {
            let mut g = -rhs[i];
            for j in 0..dim {
                g += gram[i * dim + j] * theta[j];
            }
            grad[i] = 2.0 * g;
        }
        for i in 0..dim {
            theta[i] -= step * grad[i];
        }
        project(&mut theta);
        let vf = unpack(&theta, r, VfForm::Quadratic, orientation);
        let cur = residual_sum(points, &vf);
        if (prev - cur).abs() <= 1e-10 * (1.0 + cur) {
            break;
        }
        prev = cur;
    }
    unpack(&theta, r, VfForm::Quadratic, orientation)
}

/// Sampled endogenous-state trajectories: `states[t-1][k]` is the state at
/// stage t for trajectory k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub states: Vec<Vec<Vec<f64>>>,
    pub count: usize,
    pub seed: u64,
}

impl TrajectorySet {
    pub fn stages(&self) -> usize {
        self.states.len()
    }
}

/// Uniform scalar trajectories on `(floor, (1 - delta + alpha)^(t-1) s0]`
/// with `floor = 1e-6 s0`; deterministic per seed.
pub fn sample_trajectories(
    s0: f64,
    alpha: f64,
    delta: f64,
    stages: usize,
    count: usize,
    seed: u64,
) -> TrajectorySet {
    assert!(s0 > 0.0 && stages >= 1 && count >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = 1e-6 * s0;
    let growth = 1.0 - delta + alpha;
    let states = (1..=stages)
        .map(|t| {
            let hi = growth.powi(t as i32 - 1) * s0;
            (0..count)
                .map(|_| {
                    let u: f64 = rng.gen();
                    vec![floor + (hi - floor) * (1.0 - u)]
                })
                .collect()
        })
        .collect();
    TrajectorySet {
        states,
        count,
        seed,
    }
}

/// Feasible set `{x >= 0, weights . x <= capacity}` of a reduced stage
/// subproblem.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub weights: Vec<f64>,
    pub capacity: f64,
}

impl Polytope {
    /// Euclidean projection; exact via bisection on the budget multiplier.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = y.iter().map(|&v| v.max(0.0)).collect();
        let dot: f64 = x.iter().zip(&self.weights).map(|(a, w)| a * w).sum();
        if dot <= self.capacity || !self.capacity.is_finite() {
            return x;
        }
        let value = |mu: f64| -> f64 {
            x.iter()
                .zip(&self.weights)
                .map(|(&v, &w)| (v - mu * w).max(0.0) * w)
                .sum::<f64>()
        };
        let mut lo = 0.0;
        let mut hi = 1.0;
        while value(hi) > self.capacity {
            hi *= 2.0;
            if hi > 1e30 {
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if value(mid) > self.capacity {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mu = 0.5 * (lo + hi);
        for (v, w) in x.iter_mut().zip(&self.weights) {
            *v = (*v - mu * w).max(0.0);
        }
        x
    }
}

/// Scenario context handed to the model callbacks: the expected next-stage
/// loss over the node's children (used by premium-style terms).
#[derive(Debug, Clone, Copy)]
pub struct NodeCtx {
    pub mean_next_loss: f64,
}

/// A stage model in reduced decision coordinates.
///
/// The model owns the mapping from tree node values to its own loss scale
/// (`map_loss`), the reduction of the raw decision vector (for the
/// budget-allocation instance the consumption is the budget slack), and the
/// expansion back to reported decisions.
pub trait StageModel: Sync {
    fn stages(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Dimension of the reduced decision vector the solver works in.
    fn solver_dim(&self) -> usize;
    /// Dimension of the reported decision vector.
    fn decision_dim(&self) -> usize;
    fn sense(&self) -> Sense;
    fn initial_state(&self) -> Vec<f64>;
    /// Converts a raw tree node value to the model's loss scale.
    fn map_loss(&self, raw_value: f64) -> f64 {
        raw_value
    }
    /// Stage reward h_t at decision epoch t (0-based; epoch 0 is the root).
    fn reward(&self, t: usize, s: &[f64], x: &[f64], xi: f64, ctx: &NodeCtx) -> f64;
    fn reward_grad(&self, t: usize, s: &[f64], x: &[f64], xi: f64, ctx: &NodeCtx) -> Vec<f64>;
    /// State transition g_t driven by the next-stage scenario value.
    fn transition(&self, t: usize, s: &[f64], x: &[f64], xi_next: f64) -> Vec<f64>;
    /// Jacobian d transition / d x, row-major `state_dim x solver_dim`.
    fn transition_jac(&self, t: usize, s: &[f64], x: &[f64], xi_next: f64) -> Vec<f64>;
    fn terminal(&self, s: &[f64]) -> f64;
    fn terminal_grad(&self, s: &[f64]) -> Vec<f64>;
    fn feasible(&self, t: usize, s: &[f64], ctx: &NodeCtx) -> Polytope;
    /// Expands the reduced decisions to the reported vector.
    fn expand_decisions(&self, t: usize, s: &[f64], x: &[f64], ctx: &NodeCtx) -> Vec<f64>;
    /// Declares degree-1 homogeneity of rewards and values in the scenario
    /// variable (enables the rescaling shortcut).
    fn homogeneous_degree_one(&self) -> bool {
        false
    }
}

/// Continuation of a child scenario: the exact terminal function at the
/// horizon, a fitted value function earlier.
#[derive(Debug, Clone)]
pub enum Continuation<'a> {
    Terminal,
    Fitted(&'a ValueFunction),
}

impl Continuation<'_> {
    fn evaluate<M: StageModel + ?Sized>(&self, model: &M, s: &[f64]) -> f64 {
        match self {
            Continuation::Terminal => model.terminal(s),
            Continuation::Fitted(vf) => vf.evaluate(s),
        }
    }

    fn gradient<M: StageModel + ?Sized>(&self, model: &M, s: &[f64]) -> Vec<f64> {
        match self {
            Continuation::Terminal => model.terminal_grad(s),
            Continuation::Fitted(vf) => vf.gradient(s),
        }
    }
}

/// One child scenario of a stage subproblem.
#[derive(Debug, Clone)]
pub struct ChildScenario<'a> {
    /// Scenario value on the model's loss scale.
    pub xi: f64,
    pub prob: f64,
    pub continuation: Continuation<'a>,
}

/// How the expectation over children is taken.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ExpectationOp {
    Nominal,
    /// Worst case over the divergence ball of the given radius.
    Robust { theta: f64 },
}

pub(crate) fn solve_stage_subproblem<M: StageModel + ?Sized>(
    model: &M,
    t: usize,
    s: &[f64],
    xi: f64,
    children: &[ChildScenario<'_>],
    expectation: ExpectationOp,
) -> Result<(Vec<f64>, f64), DpError> {
    let prob_sum: f64 = children.iter().map(|c| c.prob).sum();
    if (prob_sum - 1.0).abs() > 1e-8 {
        return Err(DpError::Input {
            what: format!("children probabilities sum to {prob_sum}"),
        });
    }
    let mean_next = children.iter().map(|c| c.prob * c.xi).sum::<f64>();
    let ctx = NodeCtx {
        mean_next_loss: mean_next,
    };
    let set = model.feasible(t, s, &ctx);
    if set.capacity < 0.0 {
        return Err(DpError::Infeasible {
            stage: t,
            capacity: set.capacity,
        });
    }
    let sense = match model.sense() {
        Sense::Maximize => 1.0,
        Sense::Minimize => -1.0,
    };
    let nominal = matches!(expectation, ExpectationOp::Nominal);
    let theta = match expectation {
        ExpectationOp::Robust { theta } => theta,
        ExpectationOp::Nominal => 0.0,
    };
    let probs: Vec<f64> = children.iter().map(|c| c.prob).collect();

    // signed objective (always maximized) and its gradient; the robust
    // expectation differentiates through the worst-case weights (envelope
    // theorem: the inner minimizer is exact at each iterate)
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>), DpError> {
        let mut value = sense * model.reward(t, s, x, xi, &ctx);
        let mut grad: Vec<f64> = model
            .reward_grad(t, s, x, xi, &ctx)
            .into_iter()
            .map(|g| sense * g)
            .collect();
        let conts: Vec<f64> = children
            .iter()
            .map(|c| {
                let nxt = model.transition(t, s, x, c.xi);
                c.continuation.evaluate(model, &nxt)
            })
            .collect();
        let weights: Vec<f64> = if nominal || theta == 0.0 {
            probs.clone()
        } else {
            // the ambiguity adversary works against the decision maker:
            // minimize the continuation when maximizing, and vice versa
            let v: Vec<f64> = conts.iter().map(|&v| sense * v).collect();
            let setq = AmbiguitySet::new(probs.clone(), theta)?;
            worst_case_weights(&v, &setq)?.q
        };
        for (j, c) in children.iter().enumerate() {
            let nxt = model.transition(t, s, x, c.xi);
            value += sense * weights[j] * conts[j];
            let cg = c.continuation.gradient(model, &nxt);
            let jac = model.transition_jac(t, s, x, c.xi);
            let rdim = model.state_dim();
            let xdim = model.solver_dim();
            for d in 0..xdim {
                let mut acc = 0.0;
                for rr in 0..rdim {
                    acc += cg[rr] * jac[rr * xdim + d];
                }
                grad[d] += sense * weights[j] * acc;
            }
        }
        Ok((value, grad))
    };

    let mut x = set.project(&vec![0.0; model.solver_dim()]);
    let (mut fx, mut gx) = eval(&x)?;
    let mut step = 1.0;
    for _iter in 0..100_000 {
        // first-order optimality: fixed unit-step projected gradient map
        let probe: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a + g).collect();
        let mapped = set.project(&probe);
        let res = mapped
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        let scale = x.iter().map(|v| v.abs()).fold(1.0_f64, f64::max);
        if res <= 1e-9 * scale {
            break;
        }
        // backtracking along the projection arc
        let mut accepted = false;
        for _ in 0..80 {
            let trial: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a + step * g).collect();
            let cand = set.project(&trial);
            let (fc, gc) = eval(&cand)?;
            let inner: f64 = gx
                .iter()
                .zip(cand.iter().zip(&x))
                .map(|(g, (c, o))| g * (c - o))
                .sum();
            if fc >= fx + 1e-4 * inner {
                x = cand;
                fx = fc;
                gx = gc;
                accepted = true;
                step = (step * 2.0).min(1e6);
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
        if !accepted {
            break;
        }
        if !set.capacity.is_finite() && x.iter().any(|v| v.abs() > 1e12) {
            return Err(DpError::Unbounded { stage: t });
        }
    }
    Ok((x, sense * fx))
}

/// Public single-subproblem entry: optimizes the stage objective over the
/// model's feasible set given the children scenarios and continuations.
pub fn stage_subproblem<M: StageModel + ?Sized>(
    model: &M,
    t: usize,
    s: &[f64],
    xi: f64,
    children: &[ChildScenario<'_>],
) -> Result<(Vec<f64>, f64), DpError> {
    solve_stage_subproblem(model, t, s, xi, children, ExpectationOp::Nominal)
}

/// Fit configuration of the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct FitSpec {
    pub form: VfForm,
    pub orientation: Orientation,
}

/// Per-(node, trajectory) solution entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionPoint {
    pub stage: usize,
    pub node: usize,
    pub trajectory: usize,
    pub decisions: Vec<f64>,
    pub value: f64,
}

/// Root solve plus per-stage tables, fitted value functions and counters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySolution {
    pub root_decisions: Vec<f64>,
    pub root_value: f64,
    /// Entries for decision epochs 1..T-1 (interior nodes), indexed by node
    /// id and trajectory.
    pub table: Vec<SolutionPoint>,
    /// Fitted value functions per node id (stages 2..=T-1 continuations and
    /// stage-1 root continuations when T > 1).
    pub fitted: Vec<(usize, ValueFunction)>,
    pub subproblem_count: usize,
    pub homogeneous: bool,
}

impl PolicySolution {
    pub fn fitted_for(&self, node: usize) -> Option<&ValueFunction> {
        self.fitted.iter().find(|(id, _)| *id == node).map(|(_, vf)| vf)
    }
}

fn check_dimensions<M: StageModel + ?Sized>(
    model: &M,
    tree: &ScenarioTree,
    trajectories: &TrajectorySet,
) -> Result<(), DpError> {
    if model.stages() != tree.stages {
        return Err(DpError::Mismatch {
            what: format!("model stages {} vs tree stages {}", model.stages(), tree.stages),
        });
    }
    if trajectories.stages() < tree.stages {
        return Err(DpError::Mismatch {
            what: format!(
                "trajectories cover {} stages, tree needs {}",
                trajectories.stages(),
                tree.stages
            ),
        });
    }
    Ok(())
}

pub(crate) fn backward_solve_inner<M: StageModel + ?Sized>(
    model: &M,
    tree: &ScenarioTree,
    trajectories: &TrajectorySet,
    fit: &FitSpec,
    expectation: ExpectationOp,
) -> Result<PolicySolution, DpError> {
    check_dimensions(model, tree, trajectories)?;
    let t_max = tree.stages;
    let k_count = trajectories.count;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes.len()];
    let mut fitted: Vec<(usize, ValueFunction)> = Vec::new();
    let mut table: Vec<SolutionPoint> = Vec::new();
    let mut subproblems = 0usize;

    // leaf values: exact terminal on the stage-T trajectory points
    for &leaf in &tree.stage_nodes(t_max) {
        values[leaf] = (0..k_count)
            .map(|k| model.terminal(&trajectories.states[t_max - 1][k]))
            .collect();
    }

    // interior stages T-1 .. 1
    for t in (1..t_max).rev() {
        // fit continuations for stage t+1 nodes unless they are leaves
        let mut fits: Vec<(usize, ValueFunction)> = Vec::new();
        if t + 1 < t_max {
            for &child in &tree.stage_nodes(t + 1) {
                let pts: Vec<(Vec<f64>, f64)> = (0..k_count)
                    .map(|k| (trajectories.states[t][k].clone(), values[child][k]))
                    .collect();
                let fr = fit_value_function(&pts, fit.form, fit.orientation)?;
                fits.push((child, fr.vf));
            }
        }
        let fit_lookup: std::collections::HashMap<usize, &ValueFunction> =
            fits.iter().map(|(id, vf)| (*id, vf)).collect();
        let stage_nodes = tree.stage_nodes(t);
        for &node in &stage_nodes {
            let kids = tree.children(node);
            let children: Vec<ChildScenario<'_>> = kids
                .iter()
                .map(|&c| ChildScenario {
                    xi: model.map_loss(tree.nodes[c].value),
                    prob: tree.nodes[c].prob,
                    continuation: if t + 1 == t_max {
                        Continuation::Terminal
                    } else {
                        Continuation::Fitted(fit_lookup[&c])
                    },
                })
                .collect();
            let xi_here = model.map_loss(tree.nodes[node].value);
            let solved: Result<Vec<(Vec<f64>, f64)>, DpError> = (0..k_count)
                .into_par_iter()
                .map(|k| {
                    solve_stage_subproblem(
                        model,
                        t,
                        &trajectories.states[t - 1][k],
                        xi_here,
                        &children,
                        expectation,
                    )
                })
                .collect();
            let solved = solved?;
            subproblems += k_count;
            values[node] = solved.iter().map(|(_, v)| *v).collect();
            for (k, (x, v)) in solved.into_iter().enumerate() {
                let ctx = NodeCtx {
                    mean_next_loss: children.iter().map(|c| c.prob * c.xi).sum(),
                };
                table.push(SolutionPoint {
                    stage: t,
                    node,
                    trajectory: k,
                    decisions: model.expand_decisions(t, &trajectories.states[t - 1][k], &x, &ctx),
                    value: v,
                });
            }
        }
        drop(fit_lookup);
        fitted.extend(fits);
    }

    // root epoch: children are the stage-1 nodes
    let roots = tree.stage_nodes(1);
    let mut root_fits: Vec<(usize, ValueFunction)> = Vec::new();
    if t_max > 1 {
        for &r in &roots {
            let pts: Vec<(Vec<f64>, f64)> = (0..k_count)
                .map(|k| (trajectories.states[0][k].clone(), values[r][k]))
                .collect();
            let fr = fit_value_function(&pts, fit.form, fit.orientation)?;
            root_fits.push((r, fr.vf));
        }
    }
    let root_lookup: std::collections::HashMap<usize, &ValueFunction> =
        root_fits.iter().map(|(id, vf)| (*id, vf)).collect();
    let children: Vec<ChildScenario<'_>> = roots
        .iter()
        .map(|&r| ChildScenario {
            xi: model.map_loss(tree.nodes[r].value),
            prob: tree.nodes[r].prob,
            continuation: if t_max == 1 {
                Continuation::Terminal
            } else {
                Continuation::Fitted(root_lookup[&r])
            },
        })
        .collect();
    let s0 = model.initial_state();
    let (x0, v0) = solve_stage_subproblem(model, 0, &s0, 0.0, &children, expectation)?;
    subproblems += 1;
    let ctx = NodeCtx {
        mean_next_loss: children.iter().map(|c| c.prob * c.xi).sum(),
    };
    fitted.extend(root_fits);
    Ok(PolicySolution {
        root_decisions: model.expand_decisions(0, &s0, &x0, &ctx),
        root_value: v0,
        table,
        fitted,
        subproblem_count: subproblems,
        homogeneous: false,
    })
}

/// Backward pass over the whole tree: leaves carry exact terminal values,
/// interior stages fit child continuations over the trajectory points and
/// solve one subproblem per (node, trajectory), the root solves once at the
/// initial state.
pub fn backward_solve<M: StageModel + ?Sized>(
    model: &M,
    tree: &ScenarioTree,
    trajectories: &TrajectorySet,
    fit: &FitSpec,
) -> Result<PolicySolution, DpError> {
    backward_solve_inner(model, tree, trajectories, fit, ExpectationOp::Nominal)
}

/// Collapsing shortcut for models declaring degree-1 homogeneity in the
/// scenario variable.
///
/// Scenario-value patterns repeat across same-index nodes of a stage up to
/// the path median ratio; when those ratios are stage-constant (the
/// large-sample premise) the stage subproblems coincide, so each stage is
/// solved once per stage-1 quantizer index — n K solves per stage instead
/// of n_t K — at representative scenario scales, and per-node values are
/// recovered by the first-order homogeneity rescale with the node's own
/// ratio. Requires uniform branchiness.
pub fn backward_solve_homogeneous<M: StageModel + ?Sized>(
    model: &M,
    tree: &ScenarioTree,
    trajectories: &TrajectorySet,
    fit: &FitSpec,
) -> Result<PolicySolution, DpError> {
    if !model.homogeneous_degree_one() {
        return Err(DpError::NotHomogeneous);
    }
    check_dimensions(model, tree, trajectories)?;
    let t_max = tree.stages;
    let k_count = trajectories.count;
    let roots = tree.stage_nodes(1);
    let n = roots.len();
    for t in 1..=t_max {
        if tree.stage_nodes(t).len() != n.pow(t as u32) {
            return Err(DpError::Mismatch {
                what: "homogeneous shortcut needs uniform branchiness".into(),
            });
        }
    }
    // stage-1 quantizer pattern (base-median scale)
    let template: Vec<(f64, f64)> = roots
        .iter()
        .map(|&r| (tree.nodes[r].value, tree.nodes[r].prob))
        .collect();
    // representative stage ratios rho_t = median_t / median_0 (first node
    // per stage); stage-t node values are rho_{t-1} xi_1 and their children
    // live at rho_t xi_1
    let mut rho = vec![1.0_f64; t_max + 1];
    for t in 1..=t_max {
        let first = tree.stage_nodes(t)[0];
        rho[t] = tree.nodes[first].median / tree.base_median;
    }

    let mut subproblems = 0usize;
    // representative values per (stage, index, k)
    let mut tilde: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; k_count]; n]; t_max + 1];
    let mut fitted: Vec<(usize, ValueFunction)> = Vec::new();
    let mut node_values: Vec<Vec<f64>> = vec![Vec::new(); tree.nodes.len()];

    // terminal representative values
    for i in 0..n {
        for k in 0..k_count {
            tilde[t_max][i][k] = model.terminal(&trajectories.states[t_max - 1][k]);
        }
    }
    // backward over stages with one fit and one solve batch per index
    for t in (1..t_max).rev() {
        let mut fits: Vec<ValueFunction> = Vec::new();
        if t + 1 < t_max {
            for i in 0..n {
                let pts: Vec<(Vec<f64>, f64)> = (0..k_count)
                    .map(|k| (trajectories.states[t][k].clone(), tilde[t + 1][i][k]))
                    .collect();
                fits.push(fit_value_function(&pts, fit.form, fit.orientation)?.vf);
            }
        }
        for i in 0..n {
            let children: Vec<ChildScenario<'_>> = template
                .iter()
                .enumerate()
                .map(|(j, &(xi, prob))| ChildScenario {
                    xi: model.map_loss(xi * rho[t]),
                    prob,
                    continuation: if t + 1 == t_max {
                        Continuation::Terminal
                    } else {
                        Continuation::Fitted(&fits[j])
                    },
                })
                .collect();
            let xi_here = model.map_loss(template[i].0 * rho[t - 1]);
            let solved: Result<Vec<(Vec<f64>, f64)>, DpError> = (0..k_count)
                .into_par_iter()
                .map(|k| {
                    solve_stage_subproblem(
                        model,
                        t,
                        &trajectories.states[t - 1][k],
                        xi_here,
                        &children,
                        ExpectationOp::Nominal,
                    )
                })
                .collect();
            subproblems += k_count;
            for (k, (_x, v)) in solved?.into_iter().enumerate() {
                tilde[t][i][k] = v;
            }
        }
    }
    // per-node values: homogeneity rescale by the node's own deviation
    // from the representative scale
    for t in 1..=t_max {
        for (pos, &u) in tree.stage_nodes(t).iter().enumerate() {
            let idx = pos % n;
            let rep_value = template[idx].0 * rho[t - 1];
            let correction = if rep_value.abs() > 1e-300 {
                tree.nodes[u].value / rep_value
            } else {
                1.0
            };
            node_values[u] = tilde[t][idx].iter().map(|v| v * correction).collect();
        }
    }
    // root epoch identical to the generic path
    let mut root_fits: Vec<(usize, ValueFunction)> = Vec::new();
    if t_max > 1 {
        for &r in &roots {
            let pts: Vec<(Vec<f64>, f64)> = (0..k_count)
                .map(|k| (trajectories.states[0][k].clone(), node_values[r][k]))
                .collect();
            root_fits.push((r, fit_value_function(&pts, fit.form, fit.orientation)?.vf));
        }
    }
    let root_lookup: std::collections::HashMap<usize, &ValueFunction> =
        root_fits.iter().map(|(id, vf)| (*id, vf)).collect();
    let children: Vec<ChildScenario<'_>> = roots
        .iter()
        .map(|&r| ChildScenario {
            xi: model.map_loss(tree.nodes[r].value),
            prob: tree.nodes[r].prob,
            continuation: if t_max == 1 {
                Continuation::Terminal
            } else {
                Continuation::Fitted(root_lookup[&r])
            },
        })
        .collect();
    let s0 = model.initial_state();
    let (x0, v0) = solve_stage_subproblem(model, 0, &s0, 0.0, &children, ExpectationOp::Nominal)?;
    subproblems += 1;
    let ctx = NodeCtx {
        mean_next_loss: children.iter().map(|c| c.prob * c.xi).sum(),
    };
    let root_decisions = model.expand_decisions(0, &s0, &x0, &ctx);
    fitted.extend(root_fits);
    Ok(PolicySolution {
        root_decisions,
        root_value: v0,
        table: Vec::new(),
        fitted,
        subproblem_count: subproblems,
        homogeneous: true,
    })
}

/// One realized path of a forward evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct PathOutcome {
    pub leaf: usize,
    /// Node ids along the path, stage 1 first.
    pub nodes: Vec<usize>,
    /// States entered at each stage (after the loss realizes).
    pub states: Vec<Vec<f64>>,
    /// Reported decisions per decision epoch 0..T-1.
    pub decisions: Vec<Vec<f64>>,
    /// Stage subproblem values at the realized states.
    pub values: Vec<f64>,
    pub probability: f64,
}

/// Forward pass applying the solved policy at realized states: every node's
/// subproblem is re-solved at the state reached along the path, using the
/// fitted continuations recorded in the policy.
pub fn forward_evaluate<M: StageModel + ?Sized>(
    model: &M,
    tree: &ScenarioTree,
    policy: &PolicySolution,
) -> Result<Vec<PathOutcome>, DpError> {
    let t_max = tree.stages;
    if policy.homogeneous && t_max > 2 {
        return Err(DpError::Input {
            what: "forward evaluation needs the per-node fits of a generic backward solve".into(),
        });
    }
    let s0 = model.initial_state();
    let fit_lookup: std::collections::HashMap<usize, &ValueFunction> =
        policy.fitted.iter().map(|(id, vf)| (*id, vf)).collect();
    let child_scenarios = |node_children: &[usize]| -> Vec<(f64, f64, Option<usize>)> {
        node_children
            .iter()
            .map(|&c| (model.map_loss(tree.nodes[c].value), tree.nodes[c].prob, Some(c)))
            .collect()
    };
    let build_children = |ids: &[usize], leaf_stage: bool| -> Vec<ChildScenario<'_>> {
        child_scenarios(ids)
            .into_iter()
            .map(|(xi, prob, id)| ChildScenario {
                xi,
                prob,
                continuation: if leaf_stage {
                    Continuation::Terminal
                } else {
                    Continuation::Fitted(fit_lookup[&id.unwrap()])
                },
            })
            .collect()
    };

    struct Frame {
        node: usize,
        state: Vec<f64>,
        nodes: Vec<usize>,
        states: Vec<Vec<f64>>,
        decisions: Vec<Vec<f64>>,
        values: Vec<f64>,
    }

    let roots = tree.stage_nodes(1);
    let root_children = build_children(&roots, t_max == 1);
    let (x0, v0) = solve_stage_subproblem(model, 0, &s0, 0.0, &root_children, ExpectationOp::Nominal)?;
    let ctx0 = NodeCtx {
        mean_next_loss: root_children.iter().map(|c| c.prob * c.xi).sum(),
    };
    let dec0 = model.expand_decisions(0, &s0, &x0, &ctx0);

    let mut outcomes = Vec::new();
    let mut stack: Vec<Frame> = roots
        .iter()
        .map(|&r| {
            let xi = model.map_loss(tree.nodes[r].value);
            let state = model.transition(0, &s0, &x0, xi);
            Frame {
                node: r,
                state: state.clone(),
                nodes: vec![r],
                states: vec![state],
                decisions: vec![dec0.clone()],
                values: vec![v0],
            }
        })
        .collect();
    while let Some(frame) = stack.pop() {
        let kids = tree.children(frame.node);
        if kids.is_empty() {
            outcomes.push(PathOutcome {
                leaf: frame.node,
                probability: tree.path_probability(frame.node).unwrap(),
                nodes: frame.nodes,
                states: frame.states,
                decisions: frame.decisions,
                values: frame.values,
            });
            continue;
        }
        let t = tree.nodes[frame.node].stage;
        let children = build_children(kids, t + 1 == t_max);
        let xi_here = model.map_loss(tree.nodes[frame.node].value);
        let (x, v) = solve_stage_subproblem(model, t, &frame.state, xi_here, &children, ExpectationOp::Nominal)?;
        let ctx = NodeCtx {
            mean_next_loss: children.iter().map(|c| c.prob * c.xi).sum(),
        };
        let dec = model.expand_decisions(t, &frame.state, &x, &ctx);
        for &kid in kids {
            let xi = model.map_loss(tree.nodes[kid].value);
            let state = model.transition(t, &frame.state, &x, xi);
            let mut nodes = frame.nodes.clone();
            nodes.push(kid);
            let mut states = frame.states.clone();
            states.push(state.clone());
            let mut decisions = frame.decisions.clone();
            decisions.push(dec.clone());
            let mut vals = frame.values.clone();
            vals.push(v);
            stack.push(Frame {
                node: kid,
                state,
                nodes,
                states,
                decisions,
                values: vals,
            });
        }
    }
    outcomes.sort_by_key(|o| o.leaf);
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{GroupTag, TreeNode};

    #[test]
    fn trajectories_respect_bounds_and_seed() {
        let t = sample_trajectories(10.0, 0.5, 0.0, 3, 32, 9);
        for (k, s) in t.states[0].iter().enumerate() {
            assert!(s[0] > 1e-5 * 10.0 - 1e-12 && s[0] <= 10.0, "k={k}: {}", s[0]);
        }
        for s in &t.states[2] {
            assert!(s[0] <= 2.25 * 10.0 + 1e-12);
        }
        let flat = sample_trajectories(10.0, 0.0, 0.0, 3, 32, 9);
        for stage in &flat.states {
            for s in stage {
                assert!(s[0] <= 10.0);
            }
        }
        let again = sample_trajectories(10.0, 0.5, 0.0, 3, 32, 9);
        assert_eq!(t.states, again.states);
    }

    #[test]
    fn fit_exact_concave_quadratic_with_inactive_constraints() {
        // V = -s^2 + 4s on samples where the gradient stays nonnegative
        let pts: Vec<(Vec<f64>, f64)> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&s| (vec![s], -s * s + 4.0 * s))
            .collect();
        let fit = fit_value_function(&pts, VfForm::Quadratic, Orientation::ConcaveIncreasing).unwrap();
        assert!(fit.residual < 1e-8, "residual {}", fit.residual);
        assert!(!fit.constraints_active);
        assert!((fit.vf.a[0] + 1.0).abs() < 1e-7);
        assert!((fit.vf.b[0] - 2.0).abs() < 1e-7);
        assert!(fit.vf.c.abs() < 1e-7);
    }

    #[test]
    fn fit_linear_form() {
        let pts: Vec<(Vec<f64>, f64)> = [0.0, 1.0, 2.0].iter().map(|&s| (vec![s], s)).collect();
        let fit = fit_value_function(&pts, VfForm::Linear, Orientation::ConvexIncreasing).unwrap();
        assert!((fit.vf.b[0] - 1.0).abs() < 1e-10);
        assert!(fit.vf.c.abs() < 1e-10);
        assert!(fit.residual < 1e-12);
    }

    /// Cubic data on symmetric samples: the least-squares optimum sits
    /// exactly on the semidefinite-cone boundary (zero curvature) and
    /// reproduces the samples, matching the dense grid search.
    #[test]
    fn fit_cubic_matches_grid_oracle() {
        let pts: Vec<(Vec<f64>, f64)> = [-1.0, 0.0, 1.0].iter().map(|&s| (vec![s], s * s * s)).collect();
        let fit = fit_value_function(&pts, VfForm::Quadratic, Orientation::ConvexIncreasing).unwrap();
        assert!(fit.vf.signed_min_eigenvalue() >= -1e-9);
        let samples: Vec<Vec<f64>> = pts.iter().map(|(s, _)| s.clone()).collect();
        assert!(fit.vf.monotonicity_margin(&samples) >= -1e-9);
        assert!(fit.vf.a[0].abs() < 1e-8, "curvature pinned to the cone boundary");
        // grid oracle over the 3-parameter box
        let mut best = f64::INFINITY;
        let steps = 120;
        for ia in 0..=steps {
            let a = ia as f64 / steps as f64 * 3.0; // a >= 0
            for ib in 0..=steps {
                let b = -1.5 + 3.0 * ib as f64 / steps as f64;
                // monotonicity at samples: a*s + b >= 0 for s in {-1,0,1}
                if a * (-1.0) + b < 0.0 || b < 0.0 || a + b < 0.0 {
                    continue;
                }
                for ic in 0..=steps {
                    let c = -1.5 + 3.0 * ic as f64 / steps as f64;
                    let sse: f64 = pts
                        .iter()
                        .map(|(s, v)| {
                            let e = a * s[0] * s[0] + 2.0 * b * s[0] + c - v;
                            e * e
                        })
                        .sum();
                    if sse < best {
                        best = sse;
                    }
                }
            }
        }
        assert!(
            fit.residual <= best + 1e-4,
            "fit {} vs grid oracle {best}",
            fit.residual
        );
    }

    /// Data whose gradient turns negative inside the sample range forces
    /// the scalar active-set path; the result must satisfy the constraints
    /// and beat every feasible point of a dense grid.
    #[test]
    fn fit_scalar_active_set_matches_grid_oracle() {
        let pts: Vec<(Vec<f64>, f64)> = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&s| (vec![s], -s * s + 4.0 * s))
            .collect();
        let fit = fit_value_function(&pts, VfForm::Quadratic, Orientation::ConcaveIncreasing).unwrap();
        assert!(fit.constraints_active);
        assert!(fit.vf.signed_min_eigenvalue() >= -1e-9);
        let samples: Vec<Vec<f64>> = pts.iter().map(|(s, _)| s.clone()).collect();
        assert!(fit.vf.monotonicity_margin(&samples) >= -1e-9);
        assert!(fit.residual > fit.unconstrained_residual + 1e-6);
        let mut best = f64::INFINITY;
        let steps = 160;
        for ia in 0..=steps {
            let a = -2.0 * ia as f64 / steps as f64; // a <= 0
            for ib in 0..=steps {
                let b = -1.0 + 4.0 * ib as f64 / steps as f64;
                if a * 3.0 + b < 0.0 {
                    continue; // gradient constraint at the largest sample
                }
                for ic in 0..=steps {
                    let c = -2.0 + 4.0 * ic as f64 / steps as f64;
                    let sse: f64 = pts
                        .iter()
                        .map(|(s, v)| {
                            let e = a * s[0] * s[0] + 2.0 * b * s[0] + c - v;
                            e * e
                        })
                        .sum();
                    if sse < best {
                        best = sse;
                    }
                }
            }
        }
        assert!(
            fit.residual <= best + 1e-3,
            "fit {} vs grid oracle {best}",
            fit.residual
        );
    }

    #[test]
    fn fit_constrained_never_beats_unconstrained() {
        let pts: Vec<(Vec<f64>, f64)> = [-1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|&s| (vec![s], s * s * s))
            .collect();
        let fit = fit_value_function(&pts, VfForm::Quadratic, Orientation::ConvexIncreasing).unwrap();
        assert!(fit.residual >= fit.unconstrained_residual - 1e-9);
        // inactive case: equality
        let pts2: Vec<(Vec<f64>, f64)> = [0.5, 1.0, 2.0, 3.0]
            .iter()
            .map(|&s| (vec![s], s * s + s))
            .collect();
        let fit2 = fit_value_function(&pts2, VfForm::Quadratic, Orientation::ConvexIncreasing).unwrap();
        assert!(!fit2.constraints_active);
        assert!((fit2.residual - fit2.unconstrained_residual).abs() < 1e-9);
    }

    #[test]
    fn fit_rank_deficient_falls_back_to_pseudo_inverse() {
        // all states identical: the quadratic design matrix is rank 1
        let pts: Vec<(Vec<f64>, f64)> = (0..5).map(|_| (vec![2.0], 7.0)).collect();
        let fit = fit_value_function(&pts, VfForm::Quadratic, Orientation::ConvexIncreasing).unwrap();
        assert!(fit.rank_deficient);
        // the fit still reproduces the data
        assert!((fit.vf.evaluate(&[2.0]) - 7.0).abs() < 1e-8);
    }

    #[test]
    fn fit_requires_enough_points() {
        let pts: Vec<(Vec<f64>, f64)> = vec![(vec![1.0], 1.0), (vec![2.0], 2.0)];
        assert!(matches!(
            fit_value_function(&pts, VfForm::Quadratic, Orientation::ConvexIncreasing),
            Err(DpError::InsufficientPoints { .. })
        ));
        assert!(fit_value_function(&pts, VfForm::Linear, Orientation::ConvexIncreasing).is_ok());
    }

    #[test]
    fn fit_higher_dimensional_projected_gradient() {
        // saddle data in two dimensions forces the PSD projection path
        let mut pts: Vec<(Vec<f64>, f64)> = Vec::new();
        for &x in &[0.0_f64, 0.5, 1.0, 1.5] {
            for &y in &[0.0_f64, 0.5, 1.0, 1.5] {
                pts.push((vec![x, y], x * x - y * y + x + y));
            }
        }
        let fit = fit_value_function(&pts, VfForm::Quadratic, Orientation::ConvexIncreasing).unwrap();
        assert!(fit.constraints_active);
        assert!(fit.vf.signed_min_eigenvalue() >= -1e-9);
        let samples: Vec<Vec<f64>> = pts.iter().map(|(s, _)| s.clone()).collect();
        assert!(fit.vf.monotonicity_margin(&samples) >= -1e-9);
        assert!(fit.residual >= fit.unconstrained_residual - 1e-9);
    }

    // ---- synthetic stage models ----

    /// Degree-1 homogeneous toy: reward xi * x on x in [0, 1], state frozen.
    struct HomogeneousToy {
        stages: usize,
    }

    impl StageModel for HomogeneousToy {
        fn stages(&self) -> usize {
            self.stages
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn solver_dim(&self) -> usize {
            1
        }
        fn decision_dim(&self) -> usize {
            1
        }
        fn sense(&self) -> Sense {
            Sense::Maximize
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![1.0]
        }
        fn reward(&self, _t: usize, _s: &[f64], x: &[f64], xi: f64, _ctx: &NodeCtx) -> f64 {
            xi * x[0]
        }
        fn reward_grad(&self, _t: usize, _s: &[f64], _x: &[f64], xi: f64, _ctx: &NodeCtx) -> Vec<f64> {
            vec![xi]
        }
        fn transition(&self, _t: usize, s: &[f64], _x: &[f64], _xi: f64) -> Vec<f64> {
            s.to_vec()
        }
        fn transition_jac(&self, _t: usize, _s: &[f64], _x: &[f64], _xi: f64) -> Vec<f64> {
            vec![0.0]
        }
        fn terminal(&self, _s: &[f64]) -> f64 {
            0.0
        }
        fn terminal_grad(&self, _s: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn feasible(&self, _t: usize, _s: &[f64], _ctx: &NodeCtx) -> Polytope {
            Polytope {
                weights: vec![1.0],
                capacity: 1.0,
            }
        }
        fn expand_decisions(&self, _t: usize, _s: &[f64], x: &[f64], _ctx: &NodeCtx) -> Vec<f64> {
            x.to_vec()
        }
        fn homogeneous_degree_one(&self) -> bool {
            true
        }
    }

    /// Uniform binary tree with stage-constant median ratios: stage-1
    /// values are the quantizer pattern, later stages carry `ratio` times
    /// the pattern with all medians at `ratio` times the base median.
    fn stage_constant_tree(stages: usize, ratio: f64) -> crate::tree::ScenarioTree {
        let pattern = [(1.0_f64, 0.6_f64), (3.0, 0.4)];
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut frontier: Vec<usize> = Vec::new();
        for (v, p) in pattern {
            let id = nodes.len();
            nodes.push(TreeNode {
                id,
                stage: 1,
                parent: None,
                value: v,
                prob: p,
                group: GroupTag::G1,
                median: ratio,
                params: None,
            });
            frontier.push(id);
        }
        for stage in 2..=stages {
            let mut next = Vec::new();
            for &f in &frontier {
                for (v, p) in pattern {
                    let id = nodes.len();
                    nodes.push(TreeNode {
                        id,
                        stage,
                        parent: Some(f),
                        value: v * ratio,
                        prob: p,
                        group: GroupTag::G1,
                        median: ratio,
                        params: None,
                    });
                    next.push(id);
                }
            }
            frontier = next;
        }
        crate::tree::ScenarioTree::from_parts(stages, nodes, 1.0, None).unwrap()
    }

    #[test]
    fn homogeneous_shortcut_is_exact_under_stage_constant_ratios() {
        let model = HomogeneousToy { stages: 3 };
        let tree = stage_constant_tree(3, 1.3);
        let traj = sample_trajectories(1.0, 0.0, 0.0, 3, 8, 4);
        let fit = FitSpec {
            form: VfForm::Linear,
            orientation: Orientation::ConvexIncreasing,
        };
        let generic = backward_solve(&model, &tree, &traj, &fit).unwrap();
        let shortcut = backward_solve_homogeneous(&model, &tree, &traj, &fit).unwrap();
        // analytic value with x* = 1 at the two decision stages (the
        // horizon nodes carry only the terminal, which is zero here)
        let mean = 0.6 * 1.0 + 0.4 * 3.0;
        let expect = mean * (1.0 + 1.3);
        assert!((generic.root_value - expect).abs() < 1e-7, "generic {}", generic.root_value);
        assert!(
            (shortcut.root_value - generic.root_value).abs() < 1e-6,
            "shortcut {} vs generic {}",
            shortcut.root_value,
            generic.root_value
        );
    }

    #[test]
    fn homogeneous_shortcut_identical_at_unit_ratios() {
        let model = HomogeneousToy { stages: 3 };
        let tree = stage_constant_tree(3, 1.0);
        let traj = sample_trajectories(1.0, 0.0, 0.0, 3, 8, 4);
        let fit = FitSpec {
            form: VfForm::Linear,
            orientation: Orientation::ConvexIncreasing,
        };
        let generic = backward_solve(&model, &tree, &traj, &fit).unwrap();
        let shortcut = backward_solve_homogeneous(&model, &tree, &traj, &fit).unwrap();
        assert!((shortcut.root_value - generic.root_value).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_shortcut_counts_linearly() {
        let model = HomogeneousToy { stages: 3 };
        let tree = stage_constant_tree(3, 1.0);
        let k = 8;
        let traj = sample_trajectories(1.0, 0.0, 0.0, 3, k, 4);
        let fit = FitSpec {
            form: VfForm::Linear,
            orientation: Orientation::ConvexIncreasing,
        };
        let generic = backward_solve(&model, &tree, &traj, &fit).unwrap();
        let shortcut = backward_solve_homogeneous(&model, &tree, &traj, &fit).unwrap();
        // generic: (n_1 + n_2) K + root; shortcut: n (T-1) K + root
        assert_eq!(generic.subproblem_count, (2 + 4) * k + 1);
        assert_eq!(shortcut.subproblem_count, 2 * 2 * k + 1);
        assert!(shortcut.subproblem_count < generic.subproblem_count);
    }

    #[test]
    fn homogeneity_contract_is_enforced() {
        struct NotHomog;
        impl StageModel for NotHomog {
            fn stages(&self) -> usize {
                2
            }
            fn state_dim(&self) -> usize {
                1
            }
            fn solver_dim(&self) -> usize {
                1
            }
            fn decision_dim(&self) -> usize {
                1
            }
            fn sense(&self) -> Sense {
                Sense::Maximize
            }
            fn initial_state(&self) -> Vec<f64> {
                vec![1.0]
            }
            fn reward(&self, _t: usize, _s: &[f64], x: &[f64], xi: f64, _c: &NodeCtx) -> f64 {
                xi * x[0]
            }
            fn reward_grad(&self, _t: usize, _s: &[f64], _x: &[f64], xi: f64, _c: &NodeCtx) -> Vec<f64> {
                vec![xi]
            }
            fn transition(&self, _t: usize, s: &[f64], _x: &[f64], _xi: f64) -> Vec<f64> {
                s.to_vec()
            }
            fn transition_jac(&self, _t: usize, _s: &[f64], _x: &[f64], _xi: f64) -> Vec<f64> {
                vec![0.0]
            }
            fn terminal(&self, _s: &[f64]) -> f64 {
                0.0
            }
            fn terminal_grad(&self, _s: &[f64]) -> Vec<f64> {
                vec![0.0]
            }
            fn feasible(&self, _t: usize, _s: &[f64], _c: &NodeCtx) -> Polytope {
                Polytope {
                    weights: vec![1.0],
                    capacity: 1.0,
                }
            }
            fn expand_decisions(&self, _t: usize, _s: &[f64], x: &[f64], _c: &NodeCtx) -> Vec<f64> {
                x.to_vec()
            }
        }
        let tree = stage_constant_tree(2, 1.0);
        let traj = sample_trajectories(1.0, 0.0, 0.0, 2, 8, 4);
        let fit = FitSpec {
            form: VfForm::Linear,
            orientation: Orientation::ConvexIncreasing,
        };
        assert!(matches!(
            backward_solve_homogeneous(&NotHomog, &tree, &traj, &fit),
            Err(DpError::NotHomogeneous)
        ));
    }

    #[test]
    fn identical_continuations_make_probabilities_irrelevant() {
        let model = HomogeneousToy { stages: 1 };
        let vf = ValueFunction {
            form: VfForm::Linear,
            orientation: Orientation::ConvexIncreasing,
            state_dim: 1,
            a: vec![],
            b: vec![2.0],
            c: 1.0,
        };
        let mk = |p: f64, q: f64| {
            vec![
                ChildScenario {
                    xi: 0.4,
                    prob: p,
                    continuation: Continuation::Fitted(&vf),
                },
                ChildScenario {
                    xi: 0.4,
                    prob: q,
                    continuation: Continuation::Fitted(&vf),
                },
            ]
        };
        let (_, v1) = stage_subproblem(&model, 0, &[1.0], 0.3, &mk(0.2, 0.8)).unwrap();
        let (_, v2) = stage_subproblem(&model, 0, &[1.0], 0.3, &mk(0.7, 0.3)).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    /// Convex-increasing synthetic minimization instances: the Lemma-style
    /// recursion must keep every fitted value function inside the
    /// orientation constraints.
    struct ConvexToy {
        stages: usize,
        hold: f64,
        grow: f64,
        mix: f64,
        quad: f64,
    }

    impl StageModel for ConvexToy {
        fn stages(&self) -> usize {
            self.stages
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn solver_dim(&self) -> usize {
            1
        }
        fn decision_dim(&self) -> usize {
            1
        }
        fn sense(&self) -> Sense {
            Sense::Minimize
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![1.0]
        }
        fn reward(&self, _t: usize, s: &[f64], x: &[f64], _xi: f64, _c: &NodeCtx) -> f64 {
            // jointly convex, increasing in s
            self.hold * s[0] + (x[0] - 0.4) * (x[0] - 0.4)
        }
        fn reward_grad(&self, _t: usize, _s: &[f64], x: &[f64], _xi: f64, _c: &NodeCtx) -> Vec<f64> {
            vec![2.0 * (x[0] - 0.4)]
        }
        fn transition(&self, _t: usize, s: &[f64], x: &[f64], xi: f64) -> Vec<f64> {
            vec![self.grow * s[0] + self.mix * x[0] + xi]
        }
        fn transition_jac(&self, _t: usize, _s: &[f64], _x: &[f64], _xi: f64) -> Vec<f64> {
            vec![self.mix]
        }
        fn terminal(&self, s: &[f64]) -> f64 {
            self.quad * s[0] * s[0] + s[0]
        }
        fn terminal_grad(&self, s: &[f64]) -> Vec<f64> {
            vec![2.0 * self.quad * s[0] + 1.0]
        }
        fn feasible(&self, _t: usize, _s: &[f64], _c: &NodeCtx) -> Polytope {
            Polytope {
                weights: vec![1.0],
                capacity: 1.0,
            }
        }
        fn expand_decisions(&self, _t: usize, _s: &[f64], x: &[f64], _c: &NodeCtx) -> Vec<f64> {
            x.to_vec()
        }
    }

    #[test]
    fn convex_monotone_recursion_preserves_shape_constraints() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for trial in 0..3 {
            let model = ConvexToy {
                stages: 3,
                hold: rng.gen_range(0.0..1.0),
                grow: rng.gen_range(0.5..1.2),
                mix: rng.gen_range(0.0..1.0),
                quad: rng.gen_range(0.0..0.5),
            };
            let tree = stage_constant_tree(3, 1.0);
            let traj = sample_trajectories(1.0, 0.5, 0.0, 3, 16, 23 + trial);
            let fit = FitSpec {
                form: VfForm::Quadratic,
                orientation: Orientation::ConvexIncreasing,
            };
            let policy = backward_solve(&model, &tree, &traj, &fit).unwrap();
            assert!(!policy.fitted.is_empty());
            for (node, vf) in &policy.fitted {
                assert!(
                    vf.signed_min_eigenvalue() >= -1e-9,
                    "trial {trial}, node {node}: curvature sign violated"
                );
                let stage = tree.nodes[*node].stage;
                let samples: Vec<Vec<f64>> = traj.states[stage - 1].clone();
                assert!(
                    vf.monotonicity_margin(&samples) >= -1e-9,
                    "trial {trial}, node {node}: monotonicity violated"
                );
            }
        }
    }

    #[test]
    fn backward_solve_is_deterministic() {
        let model = HomogeneousToy { stages: 3 };
        let tree = stage_constant_tree(3, 1.1);
        let traj = sample_trajectories(1.0, 0.2, 0.1, 3, 16, 77);
        let fit = FitSpec {
            form: VfForm::Linear,
            orientation: Orientation::ConvexIncreasing,
        };
        let a = backward_solve(&model, &tree, &traj, &fit).unwrap();
        let b = backward_solve(&model, &tree, &traj, &fit).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
