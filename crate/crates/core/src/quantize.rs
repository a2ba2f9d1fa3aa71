//! Stage-wise W1-optimal quantization of a scalar continuous distribution.
//!
//! The quantizer alternates the two optimality conditions of the W1
//! distortion `int min_i |w - z_i| dP`:
//!
//! - cell boundaries are midpoints of adjacent supporting points, and
//! - each supporting point is the conditional median of its cell.
//!
//! The iteration state is kept in probability space (the vector of cell
//! median levels), which keeps the fixed point invariant under affine
//! rescaling of the distribution: quantizing a rescaled Frechet law yields
//! bit-identical cell probabilities and exactly rescaled points. Cell
//! probabilities follow from CDF increments between breakpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{FrechetParams, Uniform};
use crate::util::{adaptive_simpson, ols_slope};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("distortion is infinite: the distribution has no first moment")]
    InfiniteDistortion,
    #[error("invalid input: {what}")]
    Input { what: String },
}

/// Minimal view of a scalar distribution used by the quantizer.
///
/// `quantile` must be the generalized inverse of `cdf`. The partial
/// expectation has a generic quadrature default; implementations with a
/// closed form or a smoothing substitution should override it.
pub trait DistributionView: Sync {
    fn cdf(&self, x: f64) -> f64;
    /// Quantile at an interior probability (callers guarantee 0 < p < 1).
    fn quantile(&self, p: f64) -> f64;
    fn finite_mean(&self) -> bool;

    /// `int_a^b quantile(p) dp` for `0 <= a <= b <= 1`.
    fn partial_expectation(&self, a: f64, b: f64) -> f64 {
        let hi = b.min(1.0 - 1e-14);
        adaptive_simpson(&|p: f64| self.quantile(p), a.max(1e-300), hi, 1e-12)
    }

    /// CDF evaluated at the midpoint of the two quantiles — the breakpoint
    /// update of the fixed-point iteration. The default works in value
    /// space; scale-family distributions override it with a standardized
    /// computation so that the iteration is exactly scale-free.
    fn midpoint_cdf(&self, p_lo: f64, p_hi: f64) -> f64 {
        self.cdf(0.5 * (self.quantile(p_lo) + self.quantile(p_hi)))
    }
}

impl DistributionView for FrechetParams {
    fn cdf(&self, x: f64) -> f64 {
        FrechetParams::cdf(self, x)
    }

    fn quantile(&self, p: f64) -> f64 {
        self.q(p)
    }

    fn finite_mean(&self) -> bool {
        self.lambda < 1.0
    }

    fn partial_expectation(&self, a: f64, b: f64) -> f64 {
        self.partial_expectation_impl(a, b)
    }

    /// Standardized midpoint update: with w(p) = (-log p)^(-lambda) the
    /// breakpoint CDF is exp(-(0.5 (w_lo + w_hi))^(-1/lambda)), free of the
    /// location parameters, so rescaled laws iterate bit-identically.
    fn midpoint_cdf(&self, p_lo: f64, p_hi: f64) -> f64 {
        let w_lo = (-p_lo.ln()).powf(-self.lambda);
        let w_hi = (-p_hi.ln()).powf(-self.lambda);
        (-(0.5 * (w_lo + w_hi)).powf(-1.0 / self.lambda)).exp()
    }
}

impl DistributionView for Uniform {
    fn cdf(&self, x: f64) -> f64 {
        ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn quantile(&self, p: f64) -> f64 {
        self.lo + p * (self.hi - self.lo)
    }

    fn finite_mean(&self) -> bool {
        true
    }

    fn partial_expectation(&self, a: f64, b: f64) -> f64 {
        if a >= b {
            return 0.0;
        }
        self.lo * (b - a) + (self.hi - self.lo) * 0.5 * (b * b - a * a)
    }
}

/// Optimal supporting points, their probabilities, the interior breakpoints
/// between adjacent points, and the attained W1 distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    pub points: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Interior breakpoints q_1 < ... < q_{n-1}; the outer boundaries are
    /// -inf and +inf and are left implicit.
    pub breakpoints: Vec<f64>,
    pub distortion: f64,
}

impl Quantization {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cumulative cell boundaries in probability space: 0, F(q_1), ..., 1.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.points.len() + 1);
        c.push(0.0);
        let mut acc = 0.0;
        for p in &self.probabilities {
            acc += p;
            c.push(acc);
        }
        let last = c.len() - 1;
        c[last] = 1.0;
        c
    }
}

/// Initialization of the supporting points.
#[derive(Debug, Clone, PartialEq)]
pub enum LloydInit {
    /// Points at the quantile levels (2i-1)/(2n).
    QuantileSpread,
    /// User-provided ascending points (converted to levels through the CDF).
    Points(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydConfig {
    pub init: LloydInit,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub multistart: usize,
}

impl Default for LloydConfig {
    fn default() -> Self {
        Self {
            init: LloydInit::QuantileSpread,
            max_iters: 10_000,
            rel_tol: 1e-10,
            multistart: 1,
        }
    }
}

/// Outcome of a Lloyd solve; `converged` is false when the movement
/// tolerance was not reached within `max_iters` (the last iterate is
/// still returned — the distortion is insensitive to residual movement
/// near the fixed point).
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub quantization: Quantization,
    pub converged: bool,
    pub iterations: usize,
    pub start_index: usize,
}

/// W1-optimal quantization by fixed-point iteration.
///
/// With `multistart > 1` the additional starts jitter the initial quantile
/// levels deterministically; the lowest-distortion run wins, ties broken by
/// the lowest start index.
pub fn lloyd_w1<D: DistributionView>(
    dist: &D,
    n: usize,
    config: &LloydConfig,
) -> Result<LloydRun, QuantError> {
    if n == 0 {
        return Err(QuantError::Input {
            what: "need at least one supporting point".into(),
        });
    }
    if !dist.finite_mean() {
        return Err(QuantError::InfiniteDistortion);
    }
    let starts: Vec<Vec<f64>> = (0..config.multistart.max(1))
        .map(|s| initial_levels(dist, n, &config.init, s))
        .collect();
    let mut runs: Vec<(usize, LloydRun)> = starts
        .par_iter()
        .enumerate()
        .map(|(idx, levels)| {
            let mut run = iterate(dist, levels.clone(), config.max_iters, config.rel_tol);
            run.start_index = idx;
            (idx, run)
        })
        .collect();
    runs.sort_by(|a, b| {
        a.1.quantization
            .distortion
            .total_cmp(&b.1.quantization.distortion)
            .then(a.0.cmp(&b.0))
    });
    Ok(runs.into_iter().next().unwrap().1)
}

/// Lloyd solve that also records the distortion after every iteration;
/// used by tests asserting per-iteration monotonicity.
pub fn lloyd_w1_traced<D: DistributionView>(
    dist: &D,
    n: usize,
    config: &LloydConfig,
) -> Result<(LloydRun, Vec<f64>), QuantError> {
    if !dist.finite_mean() {
        return Err(QuantError::InfiniteDistortion);
    }
    let mut levels = initial_levels(dist, n, &config.init, 0);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iters {
        let (next, movement) = step(dist, &levels);
        levels = next;
        let q = assemble(dist, &levels);
        history.push(q.distortion);
        iterations = it + 1;
        if movement < config.rel_tol {
            converged = true;
            break;
        }
    }
    let quantization = assemble(dist, &levels);
    Ok((
        LloydRun {
            quantization,
            converged,
            iterations,
            start_index: 0,
        },
        history,
    ))
}

fn initial_levels<D: DistributionView>(dist: &D, n: usize, init: &LloydInit, start: usize) -> Vec<f64> {
    match init {
        LloydInit::Points(pts) if start == 0 => pts.iter().map(|&z| dist.cdf(z).clamp(1e-12, 1.0 - 1e-12)).collect(),
        _ if start == 0 => (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect(),
        _ => {
            // deterministic jitter per start index
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + start as u64);
            let mut levels: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
            levels.sort_by(f64::total_cmp);
            levels
        }
    }
}

/// One fixed-point sweep in probability space. Returns the new levels and
/// the max relative movement of the supporting points.
fn step<D: DistributionView>(dist: &D, levels: &[f64]) -> (Vec<f64>, f64) {
    let n = levels.len();
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(0.0);
    for i in 0..n - 1 {
        bounds.push(dist.midpoint_cdf(levels[i], levels[i + 1]));
    }
    bounds.push(1.0);
    let next: Vec<f64> = (0..n).map(|i| 0.5 * (bounds[i] + bounds[i + 1])).collect();
    let movement = levels
        .iter()
        .zip(&next)
        .map(|(&old, &new)| {
            let zo = dist.quantile(old);
            let zn = dist.quantile(new);
            ((zn - zo) / zo.abs().max(1e-300)).abs()
        })
        .fold(0.0_f64, f64::max);
    (next, movement)
}

fn iterate<D: DistributionView>(dist: &D, mut levels: Vec<f64>, max_iters: usize, rel_tol: f64) -> LloydRun {
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iters {
        let (next, movement) = step(dist, &levels);
        levels = next;
        iterations = it + 1;
        if movement < rel_tol {
            converged = true;
            break;
        }
    }
    LloydRun {
        quantization: assemble(dist, &levels),
        converged,
        iterations,
        start_index: 0,
    }
}

fn assemble<D: DistributionView>(dist: &D, levels: &[f64]) -> Quantization {
    let n = levels.len();
    let points: Vec<f64> = levels.iter().map(|&m| dist.quantile(m)).collect();
    let breakpoints: Vec<f64> = (0..n.saturating_sub(1))
        .map(|i| 0.5 * (points[i] + points[i + 1]))
        .collect();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n - 1 {
        cum.push(dist.midpoint_cdf(levels[i], levels[i + 1]));
    }
    cum.push(1.0);
    let probabilities: Vec<f64> = (0..n).map(|i| cum[i + 1] - cum[i]).collect();
    let distortion = distortion_with_cells(dist, &points, &cum);
    Quantization {
        points,
        probabilities,
        breakpoints,
        distortion,
    }
}

/// `int_{plo}^{phi} |Q(p) - z| dp`, split at the kink F(z).
fn cell_abs_deviation<D: DistributionView>(dist: &D, p_lo: f64, p_hi: f64, z: f64) -> f64 {
    let pm = dist.cdf(z).clamp(p_lo, p_hi);
    let upper = dist.partial_expectation(pm, p_hi) - z * (p_hi - pm);
    let lower = z * (pm - p_lo) - dist.partial_expectation(p_lo, pm);
    upper + lower
}

fn distortion_with_cells<D: DistributionView>(dist: &D, points: &[f64], cum: &[f64]) -> f64 {
    points
        .iter()
        .enumerate()
        .map(|(i, &z)| cell_abs_deviation(dist, cum[i], cum[i + 1], z))
        .sum()
}

/// W1 distortion of arbitrary ascending supporting points: the nearest-point
/// cells are delimited by midpoints, and each cell integrates |Q(p) - z_i|
/// in probability space (absolute tolerance 1e-9 overall).
pub fn distortion<D: DistributionView>(dist: &D, points: &[f64]) -> Result<f64, QuantError> {
    if points.is_empty() {
        return Err(QuantError::Input {
            what: "need at least one point".into(),
        });
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(QuantError::Input {
            what: "points must be strictly ascending".into(),
        });
    }
    if !dist.finite_mean() {
        return Err(QuantError::InfiniteDistortion);
    }
    let n = points.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n - 1 {
        cum.push(dist.cdf(0.5 * (points[i] + points[i + 1])));
    }
    cum.push(1.0);
    Ok(distortion_with_cells(dist, points, &cum))
}

/// CDF increments between breakpoints (with implicit outer boundaries at
/// minus/plus infinity); sums to one.
pub fn probabilities_from_breakpoints<D: DistributionView>(dist: &D, breakpoints: &[f64]) -> Vec<f64> {
    assert!(
        breakpoints.windows(2).all(|w| w[1] > w[0]),
        "breakpoints must be strictly increasing"
    );
    let mut cum = Vec::with_capacity(breakpoints.len() + 2);
    cum.push(0.0);
    cum.extend(breakpoints.iter().map(|&q| dist.cdf(q)));
    cum.push(1.0);
    cum.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Rescales a quantization by a positive ratio: points, breakpoints and
/// distortion scale linearly; the probabilities are carried over unchanged.
pub fn scale(q: &Quantization, ratio: f64) -> Quantization {
    assert!(ratio > 0.0 && ratio.is_finite(), "ratio must be positive");
    Quantization {
        points: q.points.iter().map(|z| z * ratio).collect(),
        probabilities: q.probabilities.clone(),
        breakpoints: q.breakpoints.iter().map(|b| b * ratio).collect(),
        distortion: q.distortion * ratio,
    }
}

/// Distortion-vs-n probe for rate analysis; reports the log-log regression
/// slope over the attained distortions.
#[derive(Debug, Clone)]
pub struct ConvergenceProbe {
    pub pairs: Vec<(usize, f64)>,
    pub slope: f64,
}

pub fn convergence_probe<D: DistributionView>(
    dist: &D,
    n_values: &[usize],
    config: &LloydConfig,
) -> Result<ConvergenceProbe, QuantError> {
    if n_values.len() < 2 {
        return Err(QuantError::Input {
            what: "need at least two sizes for a slope".into(),
        });
    }
    let pairs: Result<Vec<(usize, f64)>, QuantError> = n_values
        .iter()
        .map(|&n| lloyd_w1(dist, n, config).map(|r| (n, r.quantization.distortion)))
        .collect();
    let pairs = pairs?;
    let xs: Vec<f64> = pairs.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|(_, d)| d.ln()).collect();
    Ok(ConvergenceProbe {
        slope: ols_slope(&xs, &ys),
        pairs,
    })
}

/// Residuals of the two fixed-point conditions at a quantization, for
/// verification: max relative breakpoint-midpoint defect and max cell-median
/// defect |F(q_{i-1}) + F(q_i) - 2 F(z_i)|.
pub fn fixed_point_residuals<D: DistributionView>(dist: &D, q: &Quantization) -> (f64, f64) {
    let n = q.points.len();
    let mut bp = 0.0_f64;
    for i in 0..n.saturating_sub(1) {
        let mid = 0.5 * (q.points[i] + q.points[i + 1]);
        bp = bp.max(((q.breakpoints[i] - mid) / q.points[i].abs().max(1e-300)).abs());
    }
    let mut cum = vec![0.0];
    cum.extend(q.breakpoints.iter().map(|&b| dist.cdf(b)));
    cum.push(1.0);
    let mut med = 0.0_f64;
    for i in 0..n {
        med = med.max((cum[i] + cum[i + 1] - 2.0 * dist.cdf(q.points[i])).abs());
    }
    (bp, med)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::FrechetParams;

    fn frechet(lambda: f64, epsilon: f64, u: f64) -> FrechetParams {
        FrechetParams::new(lambda, u, epsilon).unwrap()
    }

    #[test]
    fn uniform_single_point_is_median() {
        let d = Uniform::new(0.0, 1.0);
        let run = lloyd_w1(&d, 1, &LloydConfig::default()).unwrap();
        let q = run.quantization;
        assert!((q.points[0] - 0.5).abs() < 1e-12);
        assert!((q.distortion - 0.25).abs() < 1e-10);
        assert_eq!(q.probabilities, vec![1.0]);
    }

    #[test]
    fn uniform_two_points_analytic() {
        let d = Uniform::new(0.0, 1.0);
        let q = lloyd_w1(&d, 2, &LloydConfig::default()).unwrap().quantization;
        assert!((q.points[0] - 0.25).abs() < 1e-10);
        assert!((q.points[1] - 0.75).abs() < 1e-10);
        assert!((q.breakpoints[0] - 0.5).abs() < 1e-10);
        assert!((q.probabilities[0] - 0.5).abs() < 1e-12);
        assert!((q.distortion - 0.125).abs() < 1e-10);
    }

    #[test]
    fn frechet_single_point_is_median_with_oracle_distortion() {
        let d = frechet(0.5, 0.0, 1.0);
        let q = lloyd_w1(&d, 1, &LloydConfig::default()).unwrap().quantization;
        assert!((q.points[0] - d.median()).abs() < 1e-9);
        // quantile-integral oracle: E|X - m| = Gamma(1/2) - 2 int_0^0.5 Q
        let oracle = d.mean().unwrap() - 2.0 * d.partial_expectation_impl(0.0, 0.5);
        assert!((q.distortion - oracle).abs() < 1e-9);
        assert!((oracle - 0.925_107_86).abs() < 1e-6);
    }

    #[test]
    fn distortion_analytic_and_optimality() {
        let d = Uniform::new(0.0, 1.0);
        assert!((distortion(&d, &[0.5]).unwrap() - 0.25).abs() < 1e-12);
        let f = frechet(0.5, 0.0, 1.0);
        let run = lloyd_w1(&f, 2, &LloydConfig::default()).unwrap();
        let opt = run.quantization.distortion;
        let arbitrary = distortion(&f, &[0.25, 0.75]).unwrap();
        assert!(arbitrary >= opt - 1e-9);
    }

    #[test]
    fn distortion_zero_for_discrete_support() {
        use crate::distance::DiscreteMeasure1D;
        let m = DiscreteMeasure1D::new(vec![1.0, 2.0, 4.0], vec![0.2, 0.5, 0.3]).unwrap();
        let d = distortion(&m, &[1.0, 2.0, 4.0]).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn distortion_rejects_bad_input() {
        let d = Uniform::new(0.0, 1.0);
        assert!(distortion(&d, &[0.7, 0.2]).is_err());
        let heavy = frechet(1.5, 0.0, 1.0);
        assert!(matches!(
            distortion(&heavy, &[1.0]),
            Err(QuantError::InfiniteDistortion)
        ));
        assert!(matches!(
            lloyd_w1(&heavy, 3, &LloydConfig::default()),
            Err(QuantError::InfiniteDistortion)
        ));
    }

    #[test]
    fn breakpoint_probabilities() {
        let d = Uniform::new(0.0, 1.0);
        let p = probabilities_from_breakpoints(&d, &[1.0 / 3.0, 2.0 / 3.0]);
        for pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
        let f = frechet(0.5, 0.0, 1.0);
        let p = probabilities_from_breakpoints(&f, &[f.median()]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
        let any = probabilities_from_breakpoints(&f, &[0.8]);
        assert!((any.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_identity_and_linear() {
        let q = Quantization {
            points: vec![0.8, 2.0],
            probabilities: vec![0.6, 0.4],
            breakpoints: vec![1.4],
            distortion: 0.5,
        };
        let same = scale(&q, 1.0);
        assert_eq!(same, q);
        let s = scale(&q, 1.1);
        assert!((s.points[0] - 0.88).abs() < 1e-15);
        assert!((s.points[1] - 2.2).abs() < 1e-15);
        assert_eq!(s.probabilities, q.probabilities);
        assert!((s.distortion - 0.55).abs() < 1e-15);
    }

    /// The rescaling identity: quantizing the rescaled law directly agrees
    /// with rescaling the quantization — points to 1e-7 relative, distortion
    /// ratio equal to the ratio, probabilities bit-equal.
    #[test]
    fn scale_equivariance_against_fresh_solves() {
        let base = frechet(0.5, 0.2, 1.2);
        let cfg = LloydConfig::default();
        let q0 = lloyd_w1(&base, 5, &cfg).unwrap().quantization;
        for &r in &[0.5, 0.9, 1.3] {
            let scaled_dist = base.quick_update(r).unwrap();
            let fresh = lloyd_w1(&scaled_dist, 5, &cfg).unwrap().quantization;
            let mapped = scale(&q0, r);
            for (a, b) in fresh.points.iter().zip(&mapped.points) {
                assert!(((a - b) / b).abs() < 1e-7, "points differ at ratio {r}: {a} vs {b}");
            }
            assert_eq!(fresh.probabilities, mapped.probabilities, "probabilities not bit-equal at ratio {r}");
            let ratio = fresh.distortion / q0.distortion;
            assert!((ratio - r).abs() < 1e-8, "distortion ratio {ratio} vs {r}");
        }
    }

    #[test]
    fn lloyd_monotone_distortion_trace() {
        let d = frechet(0.5, 0.0, 1.0);
        let (_, history) = lloyd_w1_traced(&d, 6, &LloydConfig::default()).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "distortion increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fixed_point_conditions_hold_at_output() {
        let d = frechet(0.5, 0.0, 1.0);
        let q = lloyd_w1(&d, 8, &LloydConfig::default()).unwrap().quantization;
        let (bp, med) = fixed_point_residuals(&d, &q);
        assert!(bp < 1e-9, "breakpoint residual {bp}");
        assert!(med < 1e-8, "median residual {med}");
        assert!((q.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.probabilities.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn uniform_probe_rate_is_exact() {
        let d = Uniform::new(0.0, 1.0);
        let probe = convergence_probe(&d, &[1, 2, 4], &LloydConfig::default()).unwrap();
        for (n, dist) in &probe.pairs {
            assert!((dist - 0.25 / *n as f64).abs() < 1e-9);
        }
        assert!((probe.slope + 1.0).abs() < 1e-6);
    }

    /// Empirical rate for the heavy-tailed case over the doubling set; the
    /// frozen value comes from the quadrature oracle (the pre-asymptotic
    /// slope is shallower than the asymptotic -1).
    #[test]
    fn frechet_probe_slope_matches_oracle() {
        let d = frechet(0.5, 0.0, 1.0);
        let cfg = LloydConfig {
            max_iters: 60_000,
            ..LloydConfig::default()
        };
        let probe = convergence_probe(&d, &[2, 4, 8, 16, 32, 64], &cfg).unwrap();
        assert!((probe.slope - (-0.8437)).abs() < 2e-3, "slope {}", probe.slope);
    }

    #[test]
    fn multistart_returns_best_run() {
        let d = frechet(0.5, 0.0, 1.0);
        let cfg = LloydConfig {
            multistart: 4,
            ..LloydConfig::default()
        };
        let best = lloyd_w1(&d, 4, &cfg).unwrap();
        let single = lloyd_w1(&d, 4, &LloydConfig::default()).unwrap();
        assert!(best.quantization.distortion <= single.quantization.distortion + 1e-12);
    }

    #[test]
    fn quantization_json_shape() {
        let q = Quantization {
            points: vec![1.0, 2.0],
            probabilities: vec![0.5, 0.5],
            breakpoints: vec![1.5],
            distortion: 0.25,
        };
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(
            s,
            r#"{"points":[1.0,2.0],"probabilities":[0.5,0.5],"breakpoints":[1.5],"distortion":0.25}"#
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Breakpoint probabilities are nonnegative and sum to one for
            /// any strictly increasing breakpoints.
            #[test]
            fn breakpoint_probabilities_form_distribution(
                mut cuts in proptest::collection::vec(0.01f64..20.0, 1..6),
            ) {
                cuts.sort_by(f64::total_cmp);
                cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
                let d = frechet(0.5, 0.0, 1.0);
                let p = probabilities_from_breakpoints(&d, &cuts);
                prop_assert_eq!(p.len(), cuts.len() + 1);
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            /// Rescaling commutes with probability bookkeeping: the scaled
            /// quantization keeps its probability vector bitwise.
            #[test]
            fn scale_keeps_probabilities(ratio in 0.1f64..4.0) {
                let d = frechet(0.4, 0.1, 1.3);
                let q = lloyd_w1(&d, 3, &LloydConfig::default()).unwrap().quantization;
                let s = scale(&q, ratio);
                prop_assert_eq!(s.probabilities, q.probabilities);
                prop_assert!((s.distortion - ratio * q.distortion).abs() < 1e-12 * q.distortion.max(1.0));
            }
        }
    }
}
