//! Frechet (and comparison extreme-value) distribution mathematics.
//!
//! The parametrization is the three-constant form with distribution function
//!
//! ```text
//! F(x) = exp[-((x - epsilon)/(u - epsilon))^(-1/lambda)],   x > epsilon,
//! ```
//!
//! where `lambda > 0` is the shape and `epsilon < u` are location parameters;
//! F(u) = e^(-1) and the median is `epsilon + (u - epsilon) (log 2)^(-lambda)`.
//!
//! Beyond plain evaluation/sampling, the module implements the three-point
//! quantile estimator that recovers (lambda, epsilon, u) from the smallest
//! value, the median and the largest value of a sample, the fast
//! median-ratio parameter update used for below-threshold realizations, and
//! the classification of new sample points into the below-threshold group
//! (Group 1 / Case 1) and the re-estimation group (Group 2 / Cases 2-3).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::util::{adaptive_simpson, golden_min};

const LN_2: f64 = std::f64::consts::LN_2;

/// Errors raised by distribution construction, evaluation and estimation.
#[derive(Debug, Error)]
pub enum DistError {
    #[error("invalid parameters: lambda={lambda}, u={u}, epsilon={epsilon} (need lambda > 0, u > epsilon, all finite)")]
    InvalidParams { lambda: f64, u: f64, epsilon: f64 },
    #[error("infinite mean: lambda={lambda} >= 1, first moment does not exist")]
    InfiniteMean { lambda: f64 },
    #[error("argument outside domain: {what}")]
    Domain { what: String },
    #[error("g-function evaluation failed at lambda={lambda}, n={n}: nonpositive denominator")]
    GEvaluation { lambda: f64, n: usize },
    #[error("shape estimation failed: {what}")]
    EstimationFailure { what: String },
    #[error("degenerate estimate: epsilon_hat={epsilon_hat} >= sample median {median}")]
    DegenerateEstimate { epsilon_hat: f64, median: f64 },
    #[error("sample must hold at least 3 finite values, got {n}")]
    SampleTooSmall { n: usize },
    #[error("quantile-table fit failed: {what}")]
    FitError { what: String },
    #[error("csv ingest failed: {what}")]
    CsvError { what: String },
}

/// Shape/location parameters of one Frechet law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetParams {
    pub lambda: f64,
    pub u: f64,
    pub epsilon: f64,
}

impl FrechetParams {
    /// Validates `lambda > 0`, `u > epsilon` and finiteness.
    pub fn new(lambda: f64, u: f64, epsilon: f64) -> Result<Self, DistError> {
        if !(lambda.is_finite() && u.is_finite() && epsilon.is_finite()) || lambda <= 0.0 || u <= epsilon {
            return Err(DistError::InvalidParams { lambda, u, epsilon });
        }
        Ok(Self { lambda, u, epsilon })
    }

    /// Scale parameter `u - epsilon`.
    pub fn scale(&self) -> f64 {
        self.u - self.epsilon
    }

    /// Distribution function; 0 at and below the lower limit.
    pub fn cdf(&self, xi: f64) -> f64 {
        if xi <= self.epsilon {
            return 0.0;
        }
        (-((xi - self.epsilon) / self.scale()).powf(-1.0 / self.lambda)).exp()
    }

    /// Quantile function `epsilon + (u - epsilon) (-log p)^(-lambda)` on (0,1).
    pub fn quantile(&self, p: f64) -> Result<f64, DistError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistError::Domain {
                what: format!("quantile probability {p} outside (0,1)"),
            });
        }
        Ok(self.q(p))
    }

    #[inline]
    pub(crate) fn q(&self, p: f64) -> f64 {
        self.epsilon + self.scale() * (-p.ln()).powf(-self.lambda)
    }

    /// Median `epsilon + (u - epsilon) (log 2)^(-lambda)`.
    pub fn median(&self) -> f64 {
        self.epsilon + self.scale() * LN_2.powf(-self.lambda)
    }

    /// First moment `epsilon + (u - epsilon) Gamma(1 - lambda)`, finite
    /// only for `lambda < 1`.
    pub fn mean(&self) -> Result<f64, DistError> {
        if self.lambda >= 1.0 {
            return Err(DistError::InfiniteMean { lambda: self.lambda });
        }
        Ok(self.epsilon + self.scale() * gamma(1.0 - self.lambda))
    }

    /// Average value-at-risk `(1-level)^(-1) int_level^1 Q(p) dp`.
    ///
    /// `avar(0)` equals the mean; requires a finite first moment.
    pub fn avar(&self, level: f64) -> Result<f64, DistError> {
        if self.lambda >= 1.0 {
            return Err(DistError::InfiniteMean { lambda: self.lambda });
        }
        if !(0.0..1.0).contains(&level) {
            return Err(DistError::Domain {
                what: format!("avar level {level} outside [0,1)"),
            });
        }
        Ok(self.partial_expectation_impl(level, 1.0) / (1.0 - level))
    }

    /// `int_a^b Q(p) dp` computed after the substitutions `t = -log p`,
    /// `v = t^(1-lambda)`, which remove the p -> 1 singularity: the
    /// integrand becomes `exp(-v^(1/(1-lambda)))`, smooth and bounded.
    pub(crate) fn partial_expectation_impl(&self, a: f64, b: f64) -> f64 {
        if a >= b {
            return 0.0;
        }
        let lam = self.lambda;
        let base = self.epsilon * (b - a);
        if lam < 1.0 {
            let ex = 1.0 - lam;
            let vb = if b >= 1.0 { 0.0 } else { (-b.ln()).powf(ex) };
            let mut va = if a <= 0.0 { f64::INFINITY } else { (-a.ln()).powf(ex) };
            // exp(-v^(1/ex)) underflows past v^(1/ex) ~ 745
            let cap = 745.0_f64.powf(ex);
            va = va.min(cap.max(vb));
            let inner = adaptive_simpson(&|v: f64| (-v.powf(1.0 / ex)).exp(), vb, va, 1e-12);
            base + self.scale() / ex * inner
        } else {
            // infinite mean; only proper sub-unit intervals are integrable
            assert!(b < 1.0, "partial expectation up to p=1 diverges for lambda >= 1");
            let ta = -a.max(1e-300).ln();
            let tb = -b.ln();
            let inner = adaptive_simpson(&|t: f64| t.powf(-lam) * (-t).exp(), tb, ta, 1e-12);
            base + self.scale() * inner
        }
    }

    /// Inverse-transform sampling with an explicit seed; deterministic.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut g: f64 = rng.gen();
                while g == 0.0 {
                    g = rng.gen();
                }
                self.q(1.0 - g)
            })
            .collect()
    }

    /// Fast below-threshold update: both location parameters scale by the
    /// median ratio while the shape stays fixed, so the median itself scales
    /// by exactly that ratio.
    pub fn quick_update(&self, median_ratio: f64) -> Result<Self, DistError> {
        if !(median_ratio.is_finite() && median_ratio > 0.0) {
            return Err(DistError::Domain {
                what: format!("median ratio {median_ratio} must be positive and finite"),
            });
        }
        Ok(Self {
            lambda: self.lambda,
            u: self.u * median_ratio,
            epsilon: self.epsilon * median_ratio,
        })
    }
}

/// Uniform law on [lo, hi]; mainly a reference distribution for the
/// quantization tests where every quantity is analytic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform {
    pub lo: f64,
    pub hi: f64,
}

impl Uniform {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(hi > lo, "uniform needs hi > lo");
        Self { lo, hi }
    }
}

/// A sorted sample with at least three values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleState {
    values: Vec<f64>,
}

impl SampleState {
    pub fn new(mut values: Vec<f64>) -> Result<Self, DistError> {
        if values.len() < 3 {
            return Err(DistError::SampleTooSmall { n: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DistError::Domain {
                what: "sample contains non-finite values".into(),
            });
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn smallest(&self) -> f64 {
        self.values[0]
    }

    pub fn largest(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Sample median; the mean of the two central order statistics for even
    /// sizes.
    pub fn median(&self) -> f64 {
        let n = self.values.len();
        if n % 2 == 1 {
            self.values[n / 2]
        } else {
            0.5 * (self.values[n / 2 - 1] + self.values[n / 2])
        }
    }

    /// Inserts one value keeping the order.
    pub fn push(&mut self, v: f64) {
        let pos = self.values.partition_point(|x| *x <= v);
        self.values.insert(pos, v);
    }

    pub fn summary(&self) -> SampleSummary {
        SampleSummary {
            smallest: self.smallest(),
            median: self.median(),
            largest: self.largest(),
            n: self.len(),
        }
    }
}

/// The three order statistics plus the size; all the estimator needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSummary {
    pub smallest: f64,
    pub median: f64,
    pub largest: f64,
    pub n: usize,
}

/// Classification of a new sample point against the current fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleClass {
    /// Below the risk threshold in probability; parameters update by the
    /// median ratio alone.
    Group1Case1,
    /// Above the threshold but not a new maximum; full re-estimation.
    Group2Case2,
    /// A new sample maximum; full re-estimation.
    Group2Case3,
}

impl SampleClass {
    pub fn is_group1(&self) -> bool {
        matches!(self, SampleClass::Group1Case1)
    }
}

/// Right-hand side of the implicit shape equation:
///
/// ```text
/// g(lambda, N) = (N^lambda - 1) / (1 - f(lambda, N) (log 2)^lambda),
/// f(lambda, N) = (-log[1 - 0.5^(1/N)])^(-lambda).
/// ```
pub fn g_function(lambda: f64, n: usize) -> Result<f64, DistError> {
    if lambda <= 0.0 || n < 3 {
        return Err(DistError::Domain {
            what: format!("g_function needs lambda > 0 and n >= 3 (lambda={lambda}, n={n})"),
        });
    }
    let nf = n as f64;
    let f = (-(1.0 - 0.5_f64.powf(1.0 / nf)).ln()).powf(-lambda);
    let denom = 1.0 - f * LN_2.powf(lambda);
    if denom <= 0.0 {
        return Err(DistError::GEvaluation { lambda, n });
    }
    Ok((nf.powf(lambda) - 1.0) / denom)
}

/// Search controls for the shape parameter: a uniform grid on
/// [lo, hi] followed by golden-section refinement inside the best
/// bracketing cell.
#[derive(Debug, Clone, Copy)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    pub refine_tol: f64,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        // refine_tol is far below the 1e-6 needed for lambda itself because
        // the location estimate amplifies shape error by ~N^lambda log N.
        Self {
            lo: 0.01,
            hi: 5.0,
            cells: 500,
            refine_tol: 1e-10,
        }
    }
}

/// Recovers (lambda, epsilon, u) from the sample extremes and median.
///
/// The shape solves `(xN - xs)/(xs - x1) = g(lambda, N)` by grid search plus
/// golden-section refinement of the absolute residual (the residual is
/// neither convex-concave nor smooth over the full grid, but is V-shaped
/// inside the winning cell); the locations then follow in closed form.
pub fn gumbel_estimate(summary: &SampleSummary, grid: &LambdaGrid) -> Result<FrechetParams, DistError> {
    let SampleSummary {
        smallest: x1,
        median: xs,
        largest: xn,
        n,
    } = *summary;
    if n < 3 {
        return Err(DistError::SampleTooSmall { n });
    }
    if !(x1 < xs && xs < xn) {
        return Err(DistError::EstimationFailure {
            what: format!("need x1 < median < xN, got ({x1}, {xs}, {xn})"),
        });
    }
    let target = (xn - xs) / (xs - x1);
    let residual = |lam: f64| match g_function(lam, n) {
        Ok(g) => (g - target).abs(),
        Err(_) => f64::INFINITY,
    };
    let step = (grid.hi - grid.lo) / grid.cells as f64;
    let mut best_idx = 0usize;
    let mut best_val = f64::INFINITY;
    for i in 0..=grid.cells {
        let lam = grid.lo + step * i as f64;
        let r = residual(lam);
        if r < best_val {
            best_val = r;
            best_idx = i;
        }
    }
    if !best_val.is_finite() {
        return Err(DistError::EstimationFailure {
            what: "residual not finite anywhere on the shape grid".into(),
        });
    }
    // g is increasing in lambda; a target outside the grid range has its
    // minimum pinned to an endpoint with no bracket around it.
    if best_idx == 0 || best_idx == grid.cells {
        let g_lo = g_function(grid.lo, n)?;
        let g_hi = g_function(grid.hi, n)?;
        if target < g_lo || target > g_hi {
            return Err(DistError::EstimationFailure {
                what: format!(
                    "no residual bracket: target ratio {target:.6} outside g range [{g_lo:.6}, {g_hi:.6}]"
                ),
            });
        }
    }
    let lo = (grid.lo + step * (best_idx.saturating_sub(1)) as f64).max(grid.lo);
    let hi = (grid.lo + step * (best_idx + 1) as f64).min(grid.hi);
    let lambda = golden_min(&residual, lo, hi, grid.refine_tol);
    let n_pow = (n as f64).powf(lambda);
    let epsilon = (xs * n_pow - xn) / (n_pow - 1.0);
    if epsilon >= xs {
        return Err(DistError::DegenerateEstimate {
            epsilon_hat: epsilon,
            median: xs,
        });
    }
    let u = epsilon + (xs - epsilon) * LN_2.powf(lambda);
    FrechetParams::new(lambda, u, epsilon)
}

/// Classifies a new point: below the threshold percentile of the current fit
/// it stays in Group 1; past the sample maximum it is the Group-2 largest
/// loss; otherwise a Group-2 significant loss.
pub fn classify(
    summary: &SampleSummary,
    params: &FrechetParams,
    new_point: f64,
    threshold: f64,
) -> SampleClass {
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    if params.cdf(new_point) <= threshold {
        SampleClass::Group1Case1
    } else if new_point > summary.largest {
        SampleClass::Group2Case3
    } else {
        SampleClass::Group2Case2
    }
}

/// Appends a realization and updates the fit: Group 1 points trigger the
/// fast median-ratio update, everything else the complete re-estimation.
pub fn append_and_update(
    state: &SampleState,
    params: &FrechetParams,
    new_point: f64,
    threshold: f64,
    grid: &LambdaGrid,
) -> Result<(SampleState, FrechetParams, SampleClass), DistError> {
    let class = classify(&state.summary(), params, new_point, threshold);
    let mut updated = state.clone();
    updated.push(new_point);
    let new_params = if class.is_group1() {
        let old_median = state.median();
        if old_median == 0.0 {
            return Err(DistError::Domain {
                what: "median ratio undefined: current sample median is zero".into(),
            });
        }
        params.quick_update(updated.median() / old_median)?
    } else {
        gumbel_estimate(&updated.summary(), grid)?
    };
    Ok((updated, new_params, class))
}

/// One row of a cumulative loss table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub probability: f64,
    pub loss: f64,
}

/// Cumulative-probability/loss pairs plus the probability of no loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub rows: Vec<QuantileRow>,
    pub pnl: f64,
}

impl QuantileTable {
    pub fn new(rows: Vec<QuantileRow>, pnl: f64) -> Result<Self, DistError> {
        if !(pnl > 0.0 && pnl < 1.0) {
            return Err(DistError::Domain {
                what: format!("pnl {pnl} outside (0,1)"),
            });
        }
        for w in rows.windows(2) {
            if w[1].probability <= w[0].probability {
                return Err(DistError::Domain {
                    what: "table probabilities must be strictly increasing".into(),
                });
            }
            if w[1].loss < w[0].loss {
                return Err(DistError::Domain {
                    what: "table losses must be nondecreasing".into(),
                });
            }
        }
        if rows
            .iter()
            .any(|r| !(r.probability > 0.0 && r.probability < 1.0) || r.loss < 0.0)
        {
            return Err(DistError::Domain {
                what: "table rows need probability in (0,1) and loss >= 0".into(),
            });
        }
        Ok(Self { rows, pnl })
    }

    /// Reads a `probability,loss` CSV (header required, `#` comments allowed).
    pub fn from_csv_reader<R: std::io::Read>(reader: R, pnl: f64) -> Result<Self, DistError> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| DistError::CsvError { what: e.to_string() })?
            .clone();
        if headers.len() < 2 || headers[0].trim() != "probability" || headers[1].trim() != "loss" {
            return Err(DistError::CsvError {
                what: format!("expected header `probability,loss`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| DistError::CsvError { what: e.to_string() })?;
            let parse = |s: &str| -> Result<f64, DistError> {
                s.trim().parse::<f64>().map_err(|_| DistError::CsvError {
                    what: format!("non-numeric field `{s}`"),
                })
            };
            rows.push(QuantileRow {
                probability: parse(&rec[0])?,
                loss: parse(&rec[1])?,
            });
        }
        Self::new(rows, pnl)
    }
}

/// Families available for quantile-curve fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitFamily {
    Frechet,
    Weibull,
    Gumbel,
}

/// Fitted parameter record, family dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum FittedParams {
    Frechet(FrechetParams),
    Weibull { location: f64, scale: f64, shape: f64 },
    Gumbel { location: f64, scale: f64 },
}

/// Fit report: parameters, residual norm and fitted values per used row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub params: FittedParams,
    pub residual_norm: f64,
    pub rows: Vec<FitRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub probability: f64,
    pub loss: f64,
    pub fitted: f64,
}

impl QuantileFit {
    pub fn frechet_params(&self) -> Option<FrechetParams> {
        match self.params {
            FittedParams::Frechet(p) => Some(p),
            _ => None,
        }
    }
}

/// Least-squares fit of a family quantile function to the positive-loss rows
/// of a table (zero-loss rows carry the no-loss atom and are excluded).
///
/// Frechet and Weibull fix the shape by grid search plus golden-section
/// refinement with the two location/scale coefficients solved by linear
/// least squares per shape; Gumbel is a single linear solve.
pub fn fit_quantile_table(table: &QuantileTable, family: FitFamily) -> Result<QuantileFit, DistError> {
    let rows: Vec<QuantileRow> = table.rows.iter().copied().filter(|r| r.loss > 0.0).collect();
    if rows.len() < 3 {
        return Err(DistError::FitError {
            what: format!("need at least 3 positive-loss rows, got {}", rows.len()),
        });
    }
    let p: Vec<f64> = rows.iter().map(|r| r.probability).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let spread = l.last().unwrap() - l.first().unwrap();
    if spread <= 1e-12 * l.last().unwrap().abs().max(1.0) {
        return Err(DistError::FitError {
            what: "losses are constant; scale is unidentifiable".into(),
        });
    }

    // least squares of loss ~ a + b * regressor(shape), solved in centered
    // coordinates for conditioning; returns (rss, a, b)
    let solve_affine = |reg: &[f64]| -> Option<(f64, f64, f64)> {
        let n = reg.len() as f64;
        let rbar: f64 = reg.iter().sum::<f64>() / n;
        let lbar: f64 = l.iter().sum::<f64>() / n;
        let sxx: f64 = reg.iter().map(|r| (r - rbar) * (r - rbar)).sum();
        if sxx <= 0.0 {
            return None;
        }
        let sxy: f64 = reg.iter().zip(&l).map(|(r, y)| (r - rbar) * (y - lbar)).sum();
        let b = sxy / sxx;
        let a = lbar - b * rbar;
        let rss: f64 = reg
            .iter()
            .zip(&l)
            .map(|(r, y)| {
                let e = a + b * r - y;
                e * e
            })
            .sum();
        Some((rss, a, b))
    };

    let fit_shape_family = |regressor: &dyn Fn(f64, f64) -> f64| -> Result<(f64, f64, f64, f64), DistError> {
        // returns (shape, intercept, slope, rss); slope must be positive
        let grid = LambdaGrid::default();
        let objective = |shape: f64| -> f64 {
            let reg: Vec<f64> = p.iter().map(|&pi| regressor(shape, pi)).collect();
            match solve_affine(&reg) {
                Some((rss, _a, b)) if b > 0.0 => rss,
                _ => f64::INFINITY,
            }
        };
        let step = (grid.hi - grid.lo) / grid.cells as f64;
        let mut best = (f64::INFINITY, grid.lo);
        for i in 0..=grid.cells {
            let s = grid.lo + step * i as f64;
            let v = objective(s);
            if v < best.0 {
                best = (v, s);
            }
        }
        if !best.0.is_finite() {
            return Err(DistError::FitError {
                what: "no shape on the grid yields a positive scale".into(),
            });
        }
        let lo = (best.1 - step).max(grid.lo);
        let hi = (best.1 + step).min(grid.hi);
        let shape = golden_min(&objective, lo, hi, 1e-12);
        let reg: Vec<f64> = p.iter().map(|&pi| regressor(shape, pi)).collect();
        let (rss, a, b) = solve_affine(&reg).ok_or_else(|| DistError::FitError {
            what: "singular normal equations".into(),
        })?;
        if b <= 0.0 {
            return Err(DistError::FitError {
                what: "fitted scale is nonpositive (degenerate table)".into(),
            });
        }
        Ok((shape, a, b, rss))
    };

    let (params, fitted, rss) = match family {
        FitFamily::Frechet => {
            let (lam, eps, s, rss) = fit_shape_family(&|lam, pi| (-pi.ln()).powf(-lam))?;
            let fp = FrechetParams::new(lam, eps + s, eps)?;
            let fitted: Vec<f64> = p.iter().map(|&pi| fp.q(pi)).collect();
            (FittedParams::Frechet(fp), fitted, rss)
        }
        FitFamily::Weibull => {
            let (k, loc, s, rss) = fit_shape_family(&|k, pi| (-(1.0 - pi).ln()).powf(1.0 / k))?;
            let fitted: Vec<f64> = p
                .iter()
                .map(|&pi| loc + s * (-(1.0 - pi).ln()).powf(1.0 / k))
                .collect();
            (
                FittedParams::Weibull {
                    location: loc,
                    scale: s,
                    shape: k,
                },
                fitted,
                rss,
            )
        }
        FitFamily::Gumbel => {
            let reg: Vec<f64> = p.iter().map(|&pi| -(-pi.ln()).ln()).collect();
            let (rss, loc, s) = solve_affine(&reg).ok_or_else(|| DistError::FitError {
                what: "singular normal equations".into(),
            })?;
            if s <= 0.0 {
                return Err(DistError::FitError {
                    what: "fitted Gumbel scale is nonpositive".into(),
                });
            }
            let fitted: Vec<f64> = reg.iter().map(|&r| loc + s * r).collect();
            (
                FittedParams::Gumbel {
                    location: loc,
                    scale: s,
                },
                fitted,
                rss,
            )
        }
    };

    let rows = rows
        .iter()
        .zip(&fitted)
        .map(|(r, &f)| FitRow {
            probability: r.probability,
            loss: r.loss,
            fitted: f,
        })
        .collect();
    Ok(QuantileFit {
        params,
        residual_norm: rss.sqrt(),
        rows,
    })
}
