//! Approximation-quality metrics: the scalar Kantorovich distance (closed
//! form via CDF differences), exact small-instance optimal transport by
//! successive shortest augmenting paths, the nested distance between finite
//! trees by backward recursion, and the stage-wise upper bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantize::{DistributionView, Quantization};
use crate::tree::ScenarioTree;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("invalid input: {what}")]
    Input { what: String },
    #[error("distance is infinite: the distribution has no first moment")]
    InfiniteMean,
    #[error("transport marginals mismatch: |sum(source) - sum(target)| = {gap}")]
    MarginalMismatch { gap: f64 },
}

/// A discrete measure on ascending scalar atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure1D {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure1D {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, DistanceError> {
        if atoms.len() != weights.len() || atoms.is_empty() {
            return Err(DistanceError::Input {
                what: "atoms and weights must be equal-length and nonempty".into(),
            });
        }
        if atoms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DistanceError::Input {
                what: "atoms must be strictly ascending".into(),
            });
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(DistanceError::Input {
                what: "weights must be nonnegative".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DistanceError::Input {
                what: format!("weights sum to {total}, not 1"),
            });
        }
        Ok(Self { atoms, weights })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    }
}

impl DistributionView for DiscreteMeasure1D {
    fn cdf(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            if *a <= x {
                acc += w;
            } else {
                break;
            }
        }
        acc.min(1.0)
    }

    fn quantile(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            acc += w;
            if acc >= p {
                return *a;
            }
        }
        *self.atoms.last().unwrap()
    }

    fn finite_mean(&self) -> bool {
        true
    }

    fn partial_expectation(&self, a: f64, b: f64) -> f64 {
        if a >= b {
            return 0.0;
        }
        let cum = self.cumulative();
        let mut lo = 0.0_f64;
        let mut total = 0.0;
        for (i, &atom) in self.atoms.iter().enumerate() {
            let hi = cum[i];
            let overlap = (hi.min(b) - lo.max(a)).max(0.0);
            total += atom * overlap;
            lo = hi;
        }
        total
    }
}

/// W1 distance between two discrete scalar measures: the exact CDF-difference
/// integral over the merged atom grid.
pub fn kantorovich_1d(a: &DiscreteMeasure1D, b: &DiscreteMeasure1D) -> f64 {
    let mut grid: Vec<f64> = a.atoms.iter().chain(b.atoms.iter()).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut total = 0.0;
    for w in grid.windows(2) {
        let x = w[0];
        total += (a.cdf(x) - b.cdf(x)).abs() * (w[1] - w[0]);
    }
    total
}

/// W1 distance between a continuous law and a weighted point set, as the
/// quantile-difference integral `int_0^1 |Q_dist(p) - Q_q(p)| dp` with the
/// discrete quantile constant on each cumulative-probability cell.
///
/// When the point weights are the breakpoint probabilities of the points,
/// this equals the W1 distortion of the points.
pub fn semidiscrete_kantorovich<D: DistributionView>(
    dist: &D,
    q: &Quantization,
) -> Result<f64, DistanceError> {
    if !dist.finite_mean() {
        return Err(DistanceError::InfiniteMean);
    }
    let cum = q.cumulative();
    let mut total = 0.0;
    for (i, &z) in q.points.iter().enumerate() {
        let (lo, hi) = (cum[i], cum[i + 1]);
        if hi <= lo {
            continue;
        }
        let pm = dist.cdf(z).clamp(lo, hi);
        total += dist.partial_expectation(pm, hi) - z * (hi - pm);
        total += z * (pm - lo) - dist.partial_expectation(lo, pm);
    }
    Ok(total)
}

/// An optimal transport plan between two discrete marginals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    pub matrix: Vec<Vec<f64>>,
    pub cost: f64,
}

impl TransportPlan {
    /// Max row/column marginal defect, for verification.
    pub fn marginal_defect(&self, source: &[f64], target: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (i, row) in self.matrix.iter().enumerate() {
            worst = worst.max((row.iter().sum::<f64>() - source[i]).abs());
        }
        for j in 0..target.len() {
            let col: f64 = self.matrix.iter().map(|r| r[j]).sum();
            worst = worst.max((col - target[j]).abs());
        }
        worst
    }
}

/// Exact optimal transport between discrete marginals by successive
/// shortest augmenting paths on the bipartite residual network.
///
/// Intended for the small instances that arise per tree node; the marginals
/// must match within 1e-9.
pub fn transport_lp(
    cost: &[Vec<f64>],
    source: &[f64],
    target: &[f64],
) -> Result<TransportPlan, DistanceError> {
    let m = source.len();
    let n = target.len();
    if m == 0 || n == 0 || cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(DistanceError::Input {
            what: "cost matrix shape must match the marginals".into(),
        });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(DistanceError::Input {
            what: "cost entries must be finite".into(),
        });
    }
    if source.iter().chain(target.iter()).any(|&w| w < -1e-15) {
        return Err(DistanceError::Input {
            what: "marginals must be nonnegative".into(),
        });
    }
    let sum_s: f64 = source.iter().sum();
    let sum_t: f64 = target.iter().sum();
    let gap = (sum_s - sum_t).abs();
    if gap > 1e-9 {
        return Err(DistanceError::MarginalMismatch { gap });
    }

    // residual network with paired arcs; nodes: super-source, m sources,
    // n sinks, super-sink
    let nodes = m + n + 2;
    let s_star = 0usize;
    let t_star = nodes - 1;
    let src = |i: usize| 1 + i;
    let snk = |j: usize| 1 + m + j;
    struct Arc {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let mut arcs: Vec<Arc> = Vec::with_capacity(2 * (m + n + m * n));
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let push = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, from: usize, to: usize, cap: f64, cost: f64| {
        adj[from].push(arcs.len());
        arcs.push(Arc { to, cap, cost });
        adj[to].push(arcs.len());
        arcs.push(Arc {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    };
    for (i, &w) in source.iter().enumerate() {
        push(&mut arcs, &mut adj, s_star, src(i), w.max(0.0), 0.0);
    }
    for i in 0..m {
        for j in 0..n {
            push(&mut arcs, &mut adj, src(i), snk(j), f64::INFINITY, cost[i][j]);
        }
    }
    for (j, &w) in target.iter().enumerate() {
        push(&mut arcs, &mut adj, snk(j), t_star, w.max(0.0), 0.0);
    }

    const EPS: f64 = 1e-15;
    let mut remaining: f64 = source.iter().sum();
    while remaining > EPS {
        // shortest augmenting path by label-correcting search (queue-based
        // Bellman-Ford; residual arcs may carry negative costs)
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev_arc: Vec<Option<usize>> = vec![None; nodes];
        let mut in_queue = vec![false; nodes];
        let mut queue = std::collections::VecDeque::new();
        dist[s_star] = 0.0;
        queue.push_back(s_star);
        in_queue[s_star] = true;
        while let Some(v) = queue.pop_front() {
            in_queue[v] = false;
            let dv = dist[v];
            for &aid in &adj[v] {
                let arc = &arcs[aid];
                if arc.cap <= EPS {
                    continue;
                }
                let nd = dv + arc.cost;
                if nd < dist[arc.to] - 1e-15 {
                    dist[arc.to] = nd;
                    prev_arc[arc.to] = Some(aid);
                    if !in_queue[arc.to] {
                        queue.push_back(arc.to);
                        in_queue[arc.to] = true;
                    }
                }
            }
        }
        if !dist[t_star].is_finite() {
            break;
        }
        // bottleneck and augmentation along the parent arcs
        let mut delta = f64::INFINITY;
        let mut v = t_star;
        while let Some(aid) = prev_arc[v] {
            delta = delta.min(arcs[aid].cap);
            v = arcs[aid ^ 1].to;
        }
        let delta = delta.min(remaining);
        if delta <= EPS {
            break;
        }
        let mut v = t_star;
        while let Some(aid) = prev_arc[v] {
            arcs[aid].cap -= delta;
            arcs[aid ^ 1].cap += delta;
            v = arcs[aid ^ 1].to;
        }
        remaining -= delta;
    }

    // recover the plan from the reverse-arc capacities of the middle arcs
    let mut flow = vec![vec![0.0_f64; n]; m];
    for (i, row) in flow.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            // middle arcs were pushed after the m super-source arcs, in
            // row-major order, two entries (forward, reverse) per arc
            let idx = 2 * m + 2 * (i * n + j);
            *cell = arcs[idx ^ 1].cap;
        }
    }

    let total_cost = flow
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, f)| f * cost[i][j]).sum::<f64>())
        .sum();
    Ok(TransportPlan {
        matrix: flow,
        cost: total_cost,
    })
}

/// Nested distance between two trees of equal depth: leaf pairs carry the
/// additive whole-path distance, interior pairs the optimal transport of
/// their children distributions with the next-stage matrix as cost, and the
/// root pair value is returned.
pub fn nested_distance(a: &ScenarioTree, b: &ScenarioTree) -> Result<f64, DistanceError> {
    if a.stages != b.stages {
        return Err(DistanceError::Input {
            what: format!("stage counts differ: {} vs {}", a.stages, b.stages),
        });
    }
    let t_max = a.stages;
    let leaves_a = a.stage_nodes(t_max);
    let leaves_b = b.stage_nodes(t_max);
    let paths_a: Vec<Vec<f64>> = leaves_a.iter().map(|&u| a.value_path(u).unwrap()).collect();
    let paths_b: Vec<Vec<f64>> = leaves_b.iter().map(|&v| b.value_path(v).unwrap()).collect();
    let mut delta: HashMapMatrix = HashMapMatrix::new();
    for (ia, &u) in leaves_a.iter().enumerate() {
        for (ib, &v) in leaves_b.iter().enumerate() {
            let d: f64 = paths_a[ia]
                .iter()
                .zip(&paths_b[ib])
                .map(|(x, y)| (x - y).abs())
                .sum();
            delta.set(u, v, d);
        }
    }
    for t in (1..t_max).rev() {
        let nodes_a = a.stage_nodes(t);
        let nodes_b = b.stage_nodes(t);
        let results: Vec<((usize, usize), f64)> = nodes_a
            .par_iter()
            .flat_map(|&u| {
                let delta_ref = &delta;
                let nodes_b = nodes_b.clone();
                nodes_b
                    .into_par_iter()
                    .map(move |v| {
                        let ca = a.children(u);
                        let cb = b.children(v);
                        let pa: Vec<f64> = ca.iter().map(|&c| a.nodes[c].prob).collect();
                        let pb: Vec<f64> = cb.iter().map(|&c| b.nodes[c].prob).collect();
                        let cost: Vec<Vec<f64>> = ca
                            .iter()
                            .map(|&x| cb.iter().map(|&y| delta_ref.get(x, y)).collect())
                            .collect();
                        let plan = transport_lp(&cost, &pa, &pb).expect("children marginals are distributions");
                        ((u, v), plan.cost)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut next = HashMapMatrix::new();
        for ((u, v), c) in results {
            next.set(u, v, c);
        }
        delta = next;
    }
    // virtual root over the stage-1 marginals
    let roots_a = a.stage_nodes(1);
    let roots_b = b.stage_nodes(1);
    let pa: Vec<f64> = roots_a.iter().map(|&r| a.nodes[r].prob).collect();
    let pb: Vec<f64> = roots_b.iter().map(|&r| b.nodes[r].prob).collect();
    let cost: Vec<Vec<f64>> = roots_a
        .iter()
        .map(|&x| roots_b.iter().map(|&y| delta.get(x, y)).collect())
        .collect();
    Ok(transport_lp(&cost, &pa, &pb)?.cost)
}

struct HashMapMatrix {
    inner: std::collections::HashMap<(usize, usize), f64>,
}

impl HashMapMatrix {
    fn new() -> Self {
        Self {
            inner: std::collections::HashMap::new(),
        }
    }

    fn set(&mut self, u: usize, v: usize, d: f64) {
        self.inner.insert((u, v), d);
    }

    fn get(&self, u: usize, v: usize) -> f64 {
        self.inner[&(u, v)]
    }
}

/// Loss and stage-wise Kantorovich Lipschitz constants for the upper bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBounds {
    /// Lipschitz constant of the loss/profit function.
    pub l1: f64,
    /// Stage-wise constants L_2 ... L_T.
    pub lt: Vec<f64>,
}

impl LipschitzBounds {
    pub fn new(l1: f64, lt: Vec<f64>) -> Result<Self, DistanceError> {
        if l1 < 0.0 || lt.iter().any(|&l| l < 0.0) {
            return Err(DistanceError::Input {
                what: "Lipschitz constants must be nonnegative".into(),
            });
        }
        Ok(Self { l1, lt })
    }
}

/// Stage-wise bound `sum_t d_t prod_{s=t+1}^T (L_s + 1)` on the nested
/// distance from per-stage Kantorovich distances.
pub fn stagewise_upper_bound(per_stage_dka: &[f64], bounds: &LipschitzBounds) -> f64 {
    let t_max = per_stage_dka.len();
    let mut total = 0.0;
    for (t0, d) in per_stage_dka.iter().enumerate() {
        let t = t0 + 1;
        let mut prod = 1.0;
        for s in t + 1..=t_max {
            prod *= bounds.lt.get(s - 2).copied().unwrap_or(0.0) + 1.0;
        }
        total += d * prod;
    }
    total
}

/// Reporting-only error bound `c L_1 n^(-1/r1) sum_t prod_{s=t+1}^T (L_s+1)`;
/// the constant c is caller-supplied.
pub fn error_bound(n: usize, r1: usize, bounds: &LipschitzBounds, c: f64, t_stages: usize) -> f64 {
    assert!(n >= 1 && r1 >= 1);
    let mut sum = 0.0;
    for t in 1..=t_stages {
        let mut prod = 1.0;
        for s in t + 1..=t_stages {
            prod *= bounds.lt.get(s - 2).copied().unwrap_or(0.0) + 1.0;
        }
        sum += prod;
    }
    c * bounds.l1 * (n as f64).powf(-1.0 / r1 as f64) * sum
}

/// Empirical per-stage Kantorovich distances and Lipschitz constants for a
/// tree pair. The supremum over histories is approximated by the maximum
/// over cross-tree node pairs, which over-estimates every conditional
/// distance the bound derivation needs, so the resulting stage-wise bound
/// still dominates the nested distance. L_1 is reported as 1 (identity
/// loss).
pub fn empirical_stage_bounds(
    a: &ScenarioTree,
    b: &ScenarioTree,
) -> Result<(Vec<f64>, LipschitzBounds), DistanceError> {
    if a.stages != b.stages {
        return Err(DistanceError::Input {
            what: "stage counts differ".into(),
        });
    }
    let t_max = a.stages;
    let child_measure = |tree: &ScenarioTree, u: usize| -> DiscreteMeasure1D {
        let mut pairs: Vec<(f64, f64)> = tree
            .children(u)
            .iter()
            .map(|&c| (tree.nodes[c].value, tree.nodes[c].prob))
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        // merge duplicate atoms
        let mut atoms = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (v, p) in pairs {
            if let Some(last) = atoms.last() {
                if v <= *last {
                    *weights.last_mut().unwrap() += p;
                    continue;
                }
            }
            atoms.push(v);
            weights.push(p);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        DiscreteMeasure1D::new(atoms, weights).expect("children form a distribution")
    };
    let stage_measure = |tree: &ScenarioTree| -> DiscreteMeasure1D {
        let mut pairs: Vec<(f64, f64)> = tree
            .stage_nodes(1)
            .iter()
            .map(|&r| (tree.nodes[r].value, tree.nodes[r].prob))
            .collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut atoms = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (v, p) in pairs {
            if let Some(last) = atoms.last() {
                if v <= *last {
                    *weights.last_mut().unwrap() += p;
                    continue;
                }
            }
            atoms.push(v);
            weights.push(p);
        }
        DiscreteMeasure1D::new(atoms, weights).expect("stage-1 nodes form a distribution")
    };

    let mut d = vec![0.0_f64; t_max];
    d[0] = kantorovich_1d(&stage_measure(a), &stage_measure(b));
    let mut lt = vec![0.0_f64; t_max.saturating_sub(1)];
    for s in 2..=t_max {
        let ua = a.stage_nodes(s - 1);
        let ub = b.stage_nodes(s - 1);
        let mut dmax = 0.0_f64;
        let mut lmax = 0.0_f64;
        for &x in &ua {
            let mx = child_measure(a, x);
            let px = a.value_path(x).unwrap();
            for &y in &ub {
                let my = child_measure(b, y);
                let dk = kantorovich_1d(&mx, &my);
                dmax = dmax.max(dk);
                let hist: f64 = px
                    .iter()
                    .zip(b.value_path(y).unwrap().iter())
                    .map(|(p, q)| (p - q).abs())
                    .sum();
                if hist > 1e-12 {
                    lmax = lmax.max(dk / hist);
                }
            }
        }
        d[s - 1] = dmax;
        lt[s - 2] = lmax;
    }
    Ok((d, LipschitzBounds::new(1.0, lt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{FrechetParams, Uniform};
    use crate::quantize::{distortion, lloyd_w1, LloydConfig};
    use crate::tree::{GroupTag, ScenarioTree, TreeNode};

    fn unit_mass(at: f64) -> DiscreteMeasure1D {
        DiscreteMeasure1D::new(vec![at], vec![1.0]).unwrap()
    }

    #[test]
    fn kantorovich_basics() {
        let a = unit_mass(0.0);
        assert_eq!(kantorovich_1d(&a, &a), 0.0);
        let b = unit_mass(3.0);
        assert!((kantorovich_1d(&a, &b) - 3.0).abs() < 1e-15);
        let two = DiscreteMeasure1D::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let mid = unit_mass(0.5);
        assert!((kantorovich_1d(&two, &mid) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kantorovich_metric_axioms_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
                let n = rng.gen_range(1..5usize);
                let mut atoms: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                atoms.sort_by(f64::total_cmp);
                atoms.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
                let mut w: Vec<f64> = (0..atoms.len()).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                for x in &mut w {
                    *x /= s;
                }
                // exact unit sum
                let defect = 1.0 - w.iter().sum::<f64>();
                *w.last_mut().unwrap() += defect;
                DiscreteMeasure1D::new(atoms, w).unwrap()
            };
            let (a, b, c) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let dab = kantorovich_1d(&a, &b);
            let dba = kantorovich_1d(&b, &a);
            assert!((dab - dba).abs() < 1e-12);
            let dac = kantorovich_1d(&a, &c);
            let dcb = kantorovich_1d(&c, &b);
            assert!(dab <= dac + dcb + 1e-12, "triangle inequality failed");
            assert!(kantorovich_1d(&a, &a).abs() < 1e-15);
        }
    }

    #[test]
    fn semidiscrete_matches_analytic_and_distortion() {
        let u = Uniform::new(0.0, 1.0);
        let q = Quantization {
            points: vec![0.5],
            probabilities: vec![1.0],
            breakpoints: vec![],
            distortion: 0.25,
        };
        assert!((semidiscrete_kantorovich(&u, &q).unwrap() - 0.25).abs() < 1e-10);

        let d = FrechetParams::new(0.5, 1.0, 0.0).unwrap();
        let run = lloyd_w1(&d, 8, &LloydConfig::default()).unwrap().quantization;
        let semi = semidiscrete_kantorovich(&d, &run).unwrap();
        let dist = distortion(&d, &run.points).unwrap();
        assert!((semi - dist).abs() < 1e-8, "semi={semi} dist={dist}");

        // deliberately wrong probabilities are strictly worse
        let mut bad = run.clone();
        let n = bad.probabilities.len();
        bad.probabilities[0] += 0.2;
        bad.probabilities[n - 1] -= 0.2;
        let worse = semidiscrete_kantorovich(&d, &bad).unwrap();
        assert!(worse > dist + 1e-6);
    }

    #[test]
    fn transport_lp_reference_instances() {
        let plan = transport_lp(
            &[vec![0.0, 1.0], vec![1.0, 0.0]],
            &[0.5, 0.5],
            &[0.5, 0.5],
        )
        .unwrap();
        assert!(plan.cost.abs() < 1e-12);
        assert!((plan.matrix[0][0] - 0.5).abs() < 1e-12);
        assert!((plan.matrix[1][1] - 0.5).abs() < 1e-12);

        let plan = transport_lp(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((plan.cost - 1.0).abs() < 1e-12);

        assert!(matches!(
            transport_lp(&[vec![0.0]], &[1.0], &[0.5]),
            Err(DistanceError::MarginalMismatch { .. })
        ));
    }

    #[test]
    fn transport_lp_matches_vertex_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let cost: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.gen_range(0.0..4.0)).collect())
                .collect();
            let mut s: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
            let mut t: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
            let ss: f64 = s.iter().sum();
            let ts: f64 = t.iter().sum();
            for x in &mut s {
                *x /= ss;
            }
            for x in &mut t {
                *x /= ts;
            }
            let defect = 1.0 - t.iter().sum::<f64>();
            t[2] += defect;
            let defect = 1.0 - s.iter().sum::<f64>();
            s[2] += defect;
            let plan = transport_lp(&cost, &s, &t).unwrap();
            let oracle = ot_vertex_enumeration(&cost, &s, &t);
            assert!(
                (plan.cost - oracle).abs() < 1e-10,
                "ssp={} oracle={}",
                plan.cost,
                oracle
            );
            assert!(plan.marginal_defect(&s, &t) < 1e-9);
        }
    }

    #[test]
    fn transport_cost_dominates_mean_shift() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cost: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| ys.iter().map(|y| (x - y).abs()).collect())
                .collect();
            let s = [0.3, 0.4, 0.3];
            let t = [0.2, 0.5, 0.3];
            let plan = transport_lp(&cost, &s, &t).unwrap();
            let mean_gap = (xs.iter().zip(&s).map(|(x, w)| x * w).sum::<f64>()
                - ys.iter().zip(&t).map(|(y, w)| y * w).sum::<f64>())
            .abs();
            assert!(plan.cost >= mean_gap - 1e-12);
        }
    }

    fn single_path_tree(values: &[f64]) -> ScenarioTree {
        let nodes: Vec<TreeNode> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| TreeNode {
                id: i,
                stage: i + 1,
                parent: if i == 0 { None } else { Some(i - 1) },
                value: v,
                prob: 1.0,
                group: GroupTag::G1,
                median: 1.0,
                params: None,
            })
            .collect();
        ScenarioTree::from_parts(values.len(), nodes, 1.0, None).unwrap()
    }

    #[test]
    fn nested_distance_basics() {
        let a = single_path_tree(&[1.0, 2.0]);
        assert!(nested_distance(&a, &a).unwrap().abs() < 1e-15);
        let b = single_path_tree(&[1.0, 3.0]);
        assert!((nested_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = single_path_tree(&[1.0]);
        assert!(nested_distance(&a, &c).is_err());
    }

    fn random_tree(rng: &mut rand_chacha::ChaCha8Rng, depth: usize) -> ScenarioTree {
        use rand::Rng;
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut frontier: Vec<usize> = Vec::new();
        let b1 = rng.gen_range(1..4usize);
        for _ in 0..b1 {
            let id = nodes.len();
            nodes.push(TreeNode {
                id,
                stage: 1,
                parent: None,
                value: rng.gen_range(0.0..4.0),
                prob: 0.0,
                group: GroupTag::G1,
                median: 1.0,
                params: None,
            });
            frontier.push(id);
        }
        let mut w: Vec<f64> = (0..b1).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        for (k, &r) in frontier.iter().enumerate() {
            nodes[r].prob = w[k] / s;
        }
        let ids: Vec<usize> = frontier.clone();
        let sum: f64 = ids.iter().map(|&r| nodes[r].prob).sum();
        nodes[ids[0]].prob += 1.0 - sum;
        for stage in 2..=depth {
            let mut next = Vec::new();
            for &f in &frontier {
                let b = rng.gen_range(1..4usize);
                w = (0..b).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = w.iter().sum();
                let mut kids = Vec::new();
                for k in 0..b {
                    let id = nodes.len();
                    nodes.push(TreeNode {
                        id,
                        stage,
                        parent: Some(f),
                        value: rng.gen_range(0.0..4.0),
                        prob: w[k] / s,
                        group: GroupTag::G1,
                        median: 1.0,
                        params: None,
                    });
                    kids.push(id);
                    next.push(id);
                }
                let sum: f64 = kids.iter().map(|&c| nodes[c].prob).sum();
                nodes[kids[0]].prob += 1.0 - sum;
            }
            frontier = next;
        }
        ScenarioTree::from_parts(depth, nodes, 1.0, None).unwrap()
    }

    /// Direct recursive oracle with exhaustively enumerated transport at
    /// every level: each small transport problem is solved by enumerating
    /// the basic feasible solutions (bases = arc subsets of size m+n-1 of
    /// the bipartite graph), fully independent of the augmenting-path
    /// solver under test.
    fn ot_vertex_enumeration(cost: &[Vec<f64>], s: &[f64], t: &[f64]) -> f64 {
        let m = s.len();
        let n = t.len();
        if m == 1 {
            return cost[0].iter().zip(t).map(|(c, w)| c * w).sum();
        }
        if n == 1 {
            return cost.iter().zip(s).map(|(row, w)| row[0] * w).sum();
        }
        let arcs_total = m * n;
        let basis = m + n - 1;
        let rows = m + n;
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << arcs_total) {
            if mask.count_ones() as usize != basis {
                continue;
            }
            let arcs: Vec<(usize, usize)> = (0..arcs_total)
                .filter(|k| mask & (1 << k) != 0)
                .map(|k| (k / n, k % n))
                .collect();
            let mut a = vec![vec![0.0_f64; basis]; rows];
            let mut rhs = vec![0.0_f64; rows];
            for (col, &(i, j)) in arcs.iter().enumerate() {
                a[i][col] = 1.0;
                a[m + j][col] = 1.0;
            }
            rhs[..m].copy_from_slice(s);
            rhs[m..rows].copy_from_slice(t);
            let mut g = vec![vec![0.0_f64; basis]; basis];
            let mut r = vec![0.0_f64; basis];
            for row in 0..rows {
                for p in 0..basis {
                    r[p] += a[row][p] * rhs[row];
                    for q in 0..basis {
                        g[p][q] += a[row][p] * a[row][q];
                    }
                }
            }
            let Some(x) = crate::util::solve_dense(&g, &r) else {
                continue;
            };
            let mut ok = true;
            for row in 0..rows {
                let lhs: f64 = (0..basis).map(|p| a[row][p] * x[p]).sum();
                if (lhs - rhs[row]).abs() > 1e-9 {
                    ok = false;
                    break;
                }
            }
            if !ok || x.iter().any(|&f| f < -1e-9) {
                continue;
            }
            let c: f64 = arcs.iter().zip(&x).map(|(&(i, j), &f)| cost[i][j] * f).sum();
            best = best.min(c);
        }
        best
    }

    fn oracle_nested(a: &ScenarioTree, b: &ScenarioTree) -> f64 {
        let ot_small = ot_vertex_enumeration;
        let t_max = a.stages;
        let la = a.stage_nodes(t_max);
        let lb = b.stage_nodes(t_max);
        let mut delta = std::collections::HashMap::new();
        for &u in &la {
            for &v in &lb {
                let d: f64 = a
                    .value_path(u)
                    .unwrap()
                    .iter()
                    .zip(b.value_path(v).unwrap().iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                delta.insert((u, v), d);
            }
        }
        for t in (1..t_max).rev() {
            let mut next = std::collections::HashMap::new();
            for &u in &a.stage_nodes(t) {
                for &v in &b.stage_nodes(t) {
                    let ca = a.children(u);
                    let cb = b.children(v);
                    let cost: Vec<Vec<f64>> = ca
                        .iter()
                        .map(|&x| cb.iter().map(|&y| delta[&(x, y)]).collect())
                        .collect();
                    let pa: Vec<f64> = ca.iter().map(|&c| a.nodes[c].prob).collect();
                    let pb: Vec<f64> = cb.iter().map(|&c| b.nodes[c].prob).collect();
                    next.insert((u, v), ot_small(&cost, &pa, &pb));
                }
            }
            delta = next;
        }
        let ra = a.stage_nodes(1);
        let rb = b.stage_nodes(1);
        let cost: Vec<Vec<f64>> = ra
            .iter()
            .map(|&x| rb.iter().map(|&y| delta[&(x, y)]).collect())
            .collect();
        let pa: Vec<f64> = ra.iter().map(|&r| a.nodes[r].prob).collect();
        let pb: Vec<f64> = rb.iter().map(|&r| b.nodes[r].prob).collect();
        ot_small(&cost, &pa, &pb)
    }

    #[test]
    fn nested_distance_matches_recursive_oracle_and_metric_properties() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..10 {
            let a = random_tree(&mut rng, 3);
            let b = random_tree(&mut rng, 3);
            let c = random_tree(&mut rng, 3);
            let dab = nested_distance(&a, &b).unwrap();
            let oracle = oracle_nested(&a, &b);
            assert!(
                (dab - oracle).abs() < 1e-7,
                "trial {trial}: {dab} vs oracle {oracle}"
            );
            let dba = nested_distance(&b, &a).unwrap();
            assert!((dab - dba).abs() < 1e-9, "symmetry");
            let dac = nested_distance(&a, &c).unwrap();
            let dcb = nested_distance(&c, &b).unwrap();
            assert!(dab <= dac + dcb + 1e-9, "triangle inequality");
        }
    }

    #[test]
    fn nested_dominates_terminal_marginal_distance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let a = random_tree(&mut rng, 3);
            let b = random_tree(&mut rng, 3);
            let terminal = |t: &ScenarioTree| {
                let mut pairs: Vec<(f64, f64)> = t
                    .leaves()
                    .iter()
                    .map(|&l| (t.nodes[l].value, t.path_probability(l).unwrap()))
                    .collect();
                pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
                let mut atoms = Vec::new();
                let mut ws: Vec<f64> = Vec::new();
                for (v, p) in pairs {
                    if let Some(last) = atoms.last() {
                        if v <= *last {
                            *ws.last_mut().unwrap() += p;
                            continue;
                        }
                    }
                    atoms.push(v);
                    ws.push(p);
                }
                let total: f64 = ws.iter().sum();
                for w in &mut ws {
                    *w /= total;
                }
                let defect = 1.0 - ws.iter().sum::<f64>();
                *ws.last_mut().unwrap() += defect;
                DiscreteMeasure1D::new(atoms, ws).unwrap()
            };
            let dk = kantorovich_1d(&terminal(&a), &terminal(&b));
            let nd = nested_distance(&a, &b).unwrap();
            assert!(nd >= dk - 1e-9, "nested {nd} < marginal {dk}");
        }
    }

    #[test]
    fn stagewise_bound_formula() {
        let b = LipschitzBounds::new(1.0, vec![]).unwrap();
        assert!((stagewise_upper_bound(&[0.3], &b) - 0.3).abs() < 1e-15);
        let b = LipschitzBounds::new(1.0, vec![1.0]).unwrap();
        assert!((stagewise_upper_bound(&[0.1, 0.2], &b) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stagewise_bound_dominates_nested_distance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        for trial in 0..20 {
            let a = random_tree(&mut rng, 3);
            let b = random_tree(&mut rng, 3);
            let nd = nested_distance(&a, &b).unwrap();
            let (d, l) = empirical_stage_bounds(&a, &b).unwrap();
            let bound = stagewise_upper_bound(&d, &l);
            assert!(
                bound >= nd - 1e-9,
                "trial {trial}: bound {bound} < nested {nd}"
            );
        }
    }

    #[test]
    fn error_bound_rate_and_degeneracy() {
        let b = LipschitzBounds::new(1.0, vec![0.5, 0.5]).unwrap();
        let e1 = error_bound(10, 1, &b, 1.0, 3);
        let e4 = error_bound(40, 1, &b, 1.0, 3);
        assert!((e1 / e4 - 4.0).abs() < 1e-12);
        let zero = LipschitzBounds::new(0.0, vec![0.5, 0.5]).unwrap();
        assert_eq!(error_bound(10, 1, &zero, 1.0, 3), 0.0);
        let single = LipschitzBounds::new(1.0, vec![]).unwrap();
        assert!((error_bound(10, 1, &single, 1.0, 1) - 0.1).abs() < 1e-12);
    }
}
