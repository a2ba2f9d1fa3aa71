//! Finitely-valued scenario trees: construction, bookkeeping and validation.
//!
//! A tree is built from one quantizer solve on the base distribution plus,
//! per node, either the fast median-ratio interpolation (Group 1: the node's
//! children are an exactly rescaled copy of the stage quantization,
//! probabilities unchanged) or a full re-estimation of the Frechet
//! parameters followed by a fresh quantizer solve (Group 2). Each node owns
//! a copy of the base sample extended by the realizations along its path, so
//! path medians are exact.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{
    classify, gumbel_estimate, DistError, FrechetParams, LambdaGrid, SampleClass, SampleState,
};
use crate::quantize::{lloyd_w1, scale, LloydConfig, LloydInit, QuantError, Quantization};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("parameter re-estimation failed at node {node}: {source}")]
    Estimation {
        node: usize,
        #[source]
        source: DistError,
    },
    #[error("infinite-mean parameters at node {node}: lambda_hat={lambda} >= 1, children cannot be quantized")]
    InfiniteMean { node: usize, lambda: f64 },
    #[error("quantization failed at node {node}: {source}")]
    Quantize {
        node: usize,
        #[source]
        source: QuantError,
    },
    #[error("invalid build specification: {what}")]
    Spec { what: String },
    #[error("malformed tree: {what}")]
    Structure { what: String },
    #[error("unknown node id {id}")]
    UnknownNode { id: usize },
}

/// Group tag carried by every node: G1 nodes propagate by rescaling, G2
/// nodes by re-estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupTag {
    G1,
    G2,
}

impl From<SampleClass> for GroupTag {
    fn from(c: SampleClass) -> Self {
        if c.is_group1() {
            GroupTag::G1
        } else {
            GroupTag::G2
        }
    }
}

/// One tree node; `median` is the path median x_{s,t} after appending the
/// node's own value to the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub stage: usize,
    pub parent: Option<usize>,
    pub value: f64,
    pub prob: f64,
    pub group: GroupTag,
    pub median: f64,
    /// Post-append Frechet parameters at this node (the conditional law of
    /// its children); present on built trees, absent after JSON ingest.
    #[serde(skip)]
    pub params: Option<FrechetParams>,
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    stages: usize,
    base_median: f64,
    #[serde(default)]
    threshold: Option<f64>,
    nodes: Vec<TreeNode>,
}

/// Scenario tree with breadth-first node ids and per-stage conditional
/// probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeJson", into = "TreeJson")]
pub struct ScenarioTree {
    pub stages: usize,
    pub nodes: Vec<TreeNode>,
    /// Median of the base sample (x_{s,0}).
    pub base_median: f64,
    /// Grouping threshold used at build time, when known.
    pub threshold: Option<f64>,
    children: Vec<Vec<usize>>,
}

impl TryFrom<TreeJson> for ScenarioTree {
    type Error = TreeError;

    fn try_from(raw: TreeJson) -> Result<Self, TreeError> {
        ScenarioTree::from_parts(raw.stages, raw.nodes, raw.base_median, raw.threshold)
    }
}

impl From<ScenarioTree> for TreeJson {
    fn from(t: ScenarioTree) -> TreeJson {
        TreeJson {
            stages: t.stages,
            base_median: t.base_median,
            threshold: t.threshold,
            nodes: t.nodes,
        }
    }
}

impl ScenarioTree {
    /// Assembles a tree from parts, checking structural well-formedness
    /// (ids, stages, parent links). Numeric invariants are `validate`'s job.
    pub fn from_parts(
        stages: usize,
        nodes: Vec<TreeNode>,
        base_median: f64,
        threshold: Option<f64>,
    ) -> Result<Self, TreeError> {
        if stages == 0 {
            return Err(TreeError::Structure {
                what: "tree needs at least one stage".into(),
            });
        }
        let mut children = vec![Vec::new(); nodes.len()];
        for (idx, n) in nodes.iter().enumerate() {
            if n.id != idx {
                return Err(TreeError::Structure {
                    what: format!("node ids must be dense and ordered; found {} at index {idx}", n.id),
                });
            }
            if n.stage == 0 || n.stage > stages {
                return Err(TreeError::Structure {
                    what: format!("node {idx} has stage {} outside 1..={stages}", n.stage),
                });
            }
            match n.parent {
                None => {
                    if n.stage != 1 {
                        return Err(TreeError::Structure {
                            what: format!("node {idx} has no parent but stage {}", n.stage),
                        });
                    }
                }
                Some(p) => {
                    if p >= idx {
                        return Err(TreeError::Structure {
                            what: format!("node {idx} references a non-earlier parent {p}"),
                        });
                    }
                    if nodes[p].stage + 1 != n.stage {
                        return Err(TreeError::Structure {
                            what: format!("node {idx} at stage {} has parent at stage {}", n.stage, nodes[p].stage),
                        });
                    }
                    children[p].push(idx);
                }
            }
        }
        Ok(Self {
            stages,
            nodes,
            base_median,
            threshold,
            children,
        })
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode, TreeError> {
        self.nodes.get(id).ok_or(TreeError::UnknownNode { id })
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn roots(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_none())
            .map(|n| n.id)
            .collect()
    }

    pub fn stage_nodes(&self, stage: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.stage == stage)
            .map(|n| n.id)
            .collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| self.children[n.id].is_empty())
            .map(|n| n.id)
            .collect()
    }

    /// Product of conditional probabilities along the root path.
    pub fn path_probability(&self, id: usize) -> Result<f64, TreeError> {
        let mut n = self.node(id)?;
        let mut p = n.prob;
        while let Some(parent) = n.parent {
            n = self.node(parent)?;
            p *= n.prob;
        }
        Ok(p)
    }

    /// Values along the root path, stage 1 first.
    pub fn value_path(&self, id: usize) -> Result<Vec<f64>, TreeError> {
        let mut rev = Vec::new();
        let mut n = self.node(id)?;
        rev.push(n.value);
        while let Some(parent) = n.parent {
            n = self.node(parent)?;
            rev.push(n.value);
        }
        rev.reverse();
        Ok(rev)
    }

    /// Sibling index of a node within its (value-ordered) sibling group.
    fn sibling_index(&self, id: usize) -> usize {
        let siblings: Vec<usize> = match self.nodes[id].parent {
            Some(p) => self.children[p].clone(),
            None => self.roots(),
        };
        siblings.iter().position(|&s| s == id).unwrap()
    }

    /// Checks every tree invariant and reports violations; never panics.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        // children probabilities sum to one (incl. the virtual root)
        let mut groups: Vec<(Option<usize>, Vec<usize>)> = vec![(None, self.roots())];
        for n in &self.nodes {
            if !self.children[n.id].is_empty() {
                groups.push((Some(n.id), self.children[n.id].clone()));
            }
        }
        for (owner, members) in &groups {
            let sum: f64 = members.iter().map(|&c| self.nodes[c].prob).sum();
            if (sum - 1.0).abs() > 1e-10 {
                violations.push(Violation {
                    node: *owner,
                    what: format!("children probabilities sum to {sum}, not 1"),
                });
            }
            for &c in members {
                if !(0.0..=1.0 + 1e-12).contains(&self.nodes[c].prob) {
                    violations.push(Violation {
                        node: Some(c),
                        what: format!("probability {} outside [0,1]", self.nodes[c].prob),
                    });
                }
            }
        }
        // leaf path probabilities sum to one
        let leaf_sum: f64 = self
            .leaves()
            .iter()
            .map(|&l| self.path_probability(l).unwrap())
            .sum();
        if (leaf_sum - 1.0).abs() > 1e-9 {
            violations.push(Violation {
                node: None,
                what: format!("leaf path probabilities sum to {leaf_sum}, not 1"),
            });
        }
        // every non-terminal node branches; terminal nodes sit at stage T
        for n in &self.nodes {
            if self.children[n.id].is_empty() && n.stage != self.stages {
                violations.push(Violation {
                    node: Some(n.id),
                    what: format!("leaf at stage {} before the horizon {}", n.stage, self.stages),
                });
            }
        }
        // node values dominate the lower limit of their conditional law
        for n in &self.nodes {
            let parent_params = match n.parent {
                Some(p) => self.nodes[p].params,
                None => None,
            };
            if let Some(pp) = parent_params {
                if n.value < pp.epsilon {
                    violations.push(Violation {
                        node: Some(n.id),
                        what: format!("value {} below the conditional lower limit {}", n.value, pp.epsilon),
                    });
                }
            }
        }
        // Group-1 interpolation: children of a G1 node are its sibling set
        // scaled by the node's median ratio, probabilities carried over
        for n in &self.nodes {
            if n.group != GroupTag::G1 || self.children[n.id].is_empty() {
                continue;
            }
            let siblings: Vec<usize> = match n.parent {
                Some(p) => self.children[p].clone(),
                None => self.roots(),
            };
            let kids = &self.children[n.id];
            if kids.len() != siblings.len() {
                continue; // irregular branchiness: no index correspondence
            }
            let parent_median = match n.parent {
                Some(p) => self.nodes[p].median,
                None => self.base_median,
            };
            let ratio = n.median / parent_median;
            for (j, (&kid, &sib)) in kids.iter().zip(&siblings).enumerate() {
                let expect = self.nodes[sib].value * ratio;
                let got = self.nodes[kid].value;
                if ((got - expect) / expect.abs().max(1e-300)).abs() > 1e-9 {
                    violations.push(Violation {
                        node: Some(n.id),
                        what: format!("Group-1 interpolation defect at child {j}: value {got}, expected {expect}"),
                    });
                }
                if (self.nodes[kid].prob - self.nodes[sib].prob).abs() > 1e-12 {
                    violations.push(Violation {
                        node: Some(n.id),
                        what: format!("Group-1 child {j} probability differs from the stage quantizer"),
                    });
                }
            }
        }
        // Group-1 persistence: a G1 index stays G1 at the next stage
        for n in &self.nodes {
            if n.group != GroupTag::G1 || self.children[n.id].is_empty() {
                continue;
            }
            let i = self.sibling_index(n.id);
            let kids = &self.children[n.id];
            let sib_count = match n.parent {
                Some(p) => self.children[p].len(),
                None => self.roots().len(),
            };
            if kids.len() == sib_count && i < kids.len() && self.nodes[kids[i]].group != GroupTag::G1 {
                violations.push(Violation {
                    node: Some(n.id),
                    what: format!("Group-1 persistence broken: index {i} is G2 at the next stage"),
                });
            }
        }
        ValidationReport { violations }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub node: Option<usize>,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Everything the builder needs: base law, base sample, per-stage children
/// counts, the grouping threshold (probability of no loss) and the exposure
/// divisor carried along for downstream model assembly.
#[derive(Debug, Clone)]
pub struct BuildSpec {
    pub base_params: FrechetParams,
    pub base_sample: SampleState,
    pub branchiness: Vec<usize>,
    pub threshold: f64,
    pub exposure: f64,
}

impl BuildSpec {
    fn check(&self) -> Result<(), TreeError> {
        if self.branchiness.is_empty() || self.branchiness.iter().any(|&b| b == 0) {
            return Err(TreeError::Spec {
                what: "branchiness entries must all be at least 1".into(),
            });
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TreeError::Spec {
                what: format!("threshold {} outside (0,1)", self.threshold),
            });
        }
        if self.exposure <= 0.0 {
            return Err(TreeError::Spec {
                what: "exposure must be positive".into(),
            });
        }
        if self.base_params.lambda >= 1.0 {
            return Err(TreeError::Spec {
                what: format!("base shape {} >= 1 has no mean; stage-1 quantization undefined", self.base_params.lambda),
            });
        }
        Ok(())
    }
}

/// A quantizer template: one set of re-estimated parameters plus cached
/// solves per children count. Group-1 descendants reuse the solves through
/// exact rescaling.
struct Template {
    params: FrechetParams,
    solves: HashMap<usize, Quantization>,
}

impl Template {
    fn solve(&mut self, n: usize, cfg: &LloydConfig, warm: Option<Vec<f64>>) -> Result<Quantization, QuantError> {
        if let Some(q) = self.solves.get(&n) {
            return Ok(q.clone());
        }
        let mut local = cfg.clone();
        if let Some(points) = warm {
            if points.len() == n {
                local.init = LloydInit::Points(points);
            }
        }
        let q = lloyd_w1(&self.params, n, &local)?.quantization;
        self.solves.insert(n, q.clone());
        Ok(q)
    }
}

/// Builds a scenario tree breadth-first. Stage-1 children come from one
/// quantizer solve on the base law; Group-1 nodes propagate by exact
/// rescaling with unchanged probabilities; Group-2 nodes re-estimate and
/// re-quantize (warm-started from the scaled parent points).
pub fn build_tree(spec: &BuildSpec, config: &LloydConfig) -> Result<ScenarioTree, TreeError> {
    spec.check()?;
    let grid = LambdaGrid::default();
    let stages = spec.branchiness.len();
    let base_median = spec.base_sample.median();

    let mut templates = vec![Template {
        params: spec.base_params,
        solves: HashMap::new(),
    }];
    let quant1 = templates[0]
        .solve(spec.branchiness[0], config, None)
        .map_err(|source| TreeError::Quantize { node: 0, source })?;

    struct Frontier {
        id: usize,
        sample: SampleState,
        params: FrechetParams,
        template: usize,
        gen_quant: Quantization,
        class: SampleClass,
    }

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut frontier: Vec<Frontier> = Vec::new();

    for i in 0..quant1.len() {
        let value = quant1.points[i];
        let id = nodes.len();
        let class = classify(&spec.base_sample.summary(), &spec.base_params, value, spec.threshold);
        let mut sample = spec.base_sample.clone();
        sample.push(value);
        let median = sample.median();
        let (params, template) = if class.is_group1() {
            let ratio = median / base_median;
            let p = spec
                .base_params
                .quick_update(ratio)
                .map_err(|source| TreeError::Estimation { node: id, source })?;
            (p, 0usize)
        } else {
            let p = gumbel_estimate(&sample.summary(), &grid)
                .map_err(|source| TreeError::Estimation { node: id, source })?;
            templates.push(Template {
                params: p,
                solves: HashMap::new(),
            });
            (p, templates.len() - 1)
        };
        nodes.push(TreeNode {
            id,
            stage: 1,
            parent: None,
            value,
            prob: quant1.probabilities[i],
            group: class.into(),
            median,
            params: Some(params),
        });
        frontier.push(Frontier {
            id,
            sample,
            params,
            template,
            gen_quant: quant1.clone(),
            class,
        });
    }

    for stage in 2..=stages {
        let b = spec.branchiness[stage - 1];
        let mut next_frontier: Vec<Frontier> = Vec::new();
        for f in frontier {
            if f.params.lambda >= 1.0 {
                return Err(TreeError::InfiniteMean {
                    node: f.id,
                    lambda: f.params.lambda,
                });
            }
            let child_quant = if f.class.is_group1() {
                let tmpl = &mut templates[f.template];
                let base = tmpl
                    .solve(b, config, None)
                    .map_err(|source| TreeError::Quantize { node: f.id, source })?;
                let ratio = f.params.scale() / tmpl.params.scale();
                scale(&base, ratio)
            } else {
                let parent_median = match nodes[f.id].parent {
                    Some(p) => nodes[p].median,
                    None => base_median,
                };
                let warm: Vec<f64> = f
                    .gen_quant
                    .points
                    .iter()
                    .map(|z| z * nodes[f.id].median / parent_median)
                    .collect();
                let tmpl = &mut templates[f.template];
                tmpl.solve(b, config, Some(warm))
                    .map_err(|source| TreeError::Quantize { node: f.id, source })?
            };
            for j in 0..child_quant.len() {
                let value = child_quant.points[j];
                let id = nodes.len();
                let class = classify(&f.sample.summary(), &f.params, value, spec.threshold);
                let mut sample = f.sample.clone();
                sample.push(value);
                let median = sample.median();
                let (params, template) = if class.is_group1() {
                    let ratio = median / f.sample.median();
                    let p = f
                        .params
                        .quick_update(ratio)
                        .map_err(|source| TreeError::Estimation { node: id, source })?;
                    (p, f.template)
                } else {
                    let p = gumbel_estimate(&sample.summary(), &grid)
                        .map_err(|source| TreeError::Estimation { node: id, source })?;
                    templates.push(Template {
                        params: p,
                        solves: HashMap::new(),
                    });
                    (p, templates.len() - 1)
                };
                nodes.push(TreeNode {
                    id,
                    stage,
                    parent: Some(f.id),
                    value,
                    prob: child_quant.probabilities[j],
                    group: class.into(),
                    median,
                    params: Some(params),
                });
                if stage < stages {
                    next_frontier.push(Frontier {
                        id,
                        sample: sample.clone(),
                        params,
                        template,
                        gen_quant: child_quant.clone(),
                        class,
                    });
                }
            }
        }
        frontier = next_frontier;
    }

    ScenarioTree::from_parts(stages, nodes, base_median, Some(spec.threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::FrechetParams;

    fn base_sample(d: &FrechetParams, n: usize) -> SampleState {
        let vals: Vec<f64> = (0..n).map(|i| d.q((i as f64 + 0.5) / n as f64)).collect();
        SampleState::new(vals).unwrap()
    }

    fn toy_spec(branchiness: Vec<usize>) -> BuildSpec {
        let d = FrechetParams::new(0.5, 1.0, 0.0).unwrap();
        BuildSpec {
            base_params: d,
            base_sample: base_sample(&d, 1001),
            branchiness,
            threshold: 0.6779,
            exposure: 100.0,
        }
    }

    #[test]
    fn single_path_tree_follows_median_recursion() {
        let spec = toy_spec(vec![1, 1]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        assert_eq!(tree.nodes.len(), 2);
        let root = &tree.nodes[0];
        let kid = &tree.nodes[1];
        let ratio = root.median / tree.base_median;
        assert!(((kid.value - root.value * ratio) / kid.value).abs() < 1e-12);
        assert_eq!(root.prob, 1.0);
        assert_eq!(kid.prob, 1.0);
        assert!((tree.path_probability(1).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn group1_children_are_scaled_stage_one_points() {
        let spec = toy_spec(vec![3, 3]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        let roots = tree.roots();
        let root_vals: Vec<f64> = roots.iter().map(|&r| tree.nodes[r].value).collect();
        let root_probs: Vec<f64> = roots.iter().map(|&r| tree.nodes[r].prob).collect();
        for &r in &roots {
            let n = &tree.nodes[r];
            if n.group != GroupTag::G1 {
                continue;
            }
            let ratio = n.median / tree.base_median;
            for (j, &kid) in tree.children(r).iter().enumerate() {
                let expect = root_vals[j] * ratio;
                assert!(
                    ((tree.nodes[kid].value - expect) / expect).abs() < 1e-10,
                    "child {j} of root {r}"
                );
                assert_eq!(tree.nodes[kid].prob, root_probs[j]);
            }
        }
        // cumulative Group-1 mass per sibling group stays below the
        // threshold plus one cell
        let g1_mass: f64 = roots
            .iter()
            .filter(|&&r| tree.nodes[r].group == GroupTag::G1)
            .map(|&r| tree.nodes[r].prob)
            .sum();
        let max_cell = roots
            .iter()
            .map(|&r| tree.nodes[r].prob)
            .fold(0.0_f64, f64::max);
        assert!(g1_mass <= spec.threshold + max_cell + 1e-12);
    }

    #[test]
    fn builds_are_deterministic() {
        let spec = toy_spec(vec![3, 2]);
        let a = build_tree(&spec, &LloydConfig::default()).unwrap();
        let b = build_tree(&spec, &LloydConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_is_clean_on_built_trees() {
        let spec = toy_spec(vec![3, 3, 2]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        let report = tree.validate();
        assert!(report.is_clean(), "violations: {:?}", report.violations);
    }

    #[test]
    fn validation_catches_injected_faults() {
        let spec = toy_spec(vec![2, 2]);
        let mut tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        tree.nodes[0].prob += 1e-3;
        let report = tree.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| v.what.contains("children probabilities sum")));
        // restore and break the interpolation instead
        tree.nodes[0].prob -= 1e-3;
        if let Some(kid) = tree.children(0).first().copied() {
            tree.nodes[kid].value *= 1.01;
            let report = tree.validate();
            assert!(
                !report.is_clean(),
                "perturbed child value must trip a violation"
            );
        }
    }

    #[test]
    fn leaf_path_probabilities_sum_to_one() {
        let spec = toy_spec(vec![4, 3, 2]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        let total: f64 = tree
            .leaves()
            .iter()
            .map(|&l| tree.path_probability(l).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(tree.leaves().len(), 24);
        assert!(tree.path_probability(9999).is_err());
    }

    #[test]
    fn eq15_telescoping_along_group1_paths() {
        let spec = toy_spec(vec![3, 3, 3]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        // follow an all-G1 chain at a fixed sibling index
        for &r in &tree.roots() {
            if tree.nodes[r].group != GroupTag::G1 {
                continue;
            }
            let i = tree
                .roots()
                .iter()
                .position(|&x| x == r)
                .unwrap();
            let mut chain = vec![r];
            loop {
                let last = *chain.last().unwrap();
                if tree.nodes[last].group != GroupTag::G1 || tree.children(last).is_empty() {
                    break;
                }
                chain.push(tree.children(last)[i]);
            }
            // telescoping: xi_{t2} = (median_{t2-1}/median_{t1-1}) xi_{t1}
            for w in chain.windows(3) {
                let (a, b, c) = (w[0], w[1], w[2]);
                let lhs = tree.nodes[c].value / tree.nodes[a].value;
                let m_t1_prev = match tree.nodes[a].parent {
                    Some(p) => tree.nodes[p].median,
                    None => tree.base_median,
                };
                let expect = tree.nodes[b].median / m_t1_prev;
                assert!(
                    ((lhs - expect) / expect).abs() < 1e-9,
                    "telescoping defect: {lhs} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn group1_median_ratios_are_tight_for_large_samples() {
        let d = FrechetParams::new(0.5, 1.0, 0.0).unwrap();
        let n = 10_000;
        let spec = BuildSpec {
            base_params: d,
            base_sample: base_sample(&d, n),
            branchiness: vec![3, 3],
            threshold: 0.6779,
            exposure: 100.0,
        };
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        let slack = 10.0 / n as f64;
        for node in &tree.nodes {
            if node.group != GroupTag::G1 {
                continue;
            }
            let parent_median = match node.parent {
                Some(p) => tree.nodes[p].median,
                None => tree.base_median,
            };
            let ratio = node.median / parent_median;
            assert!(
                (1.0 - slack..=1.0 + slack).contains(&ratio),
                "ratio {ratio} drifts past 1 +- {slack}"
            );
        }
    }

    #[test]
    fn irregular_branchiness_counts() {
        let spec = toy_spec(vec![3, 2, 4]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        assert_eq!(tree.stage_nodes(1).len(), 3);
        assert_eq!(tree.stage_nodes(2).len(), 6);
        assert_eq!(tree.stage_nodes(3).len(), 24);
        // n_t = sum over parents of their children counts
        let total: usize = tree.stage_nodes(2).iter().map(|&u| tree.children(u).len()).sum();
        assert_eq!(total, 24);
    }

    #[test]
    fn json_round_trip_preserves_schema() {
        let spec = toy_spec(vec![2, 2]);
        let tree = build_tree(&spec, &LloydConfig::default()).unwrap();
        let json = serde_json::to_string_pretty(&tree).unwrap();
        assert!(json.contains("\"stages\""));
        assert!(json.contains("\"group\": \"G1\"") || json.contains("\"group\": \"G2\""));
        for key in ["\"id\"", "\"stage\"", "\"parent\"", "\"value\"", "\"prob\"", "\"median\""] {
            assert!(json.contains(key), "missing {key}");
        }
        let back: ScenarioTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back.stages, tree.stages);
        assert_eq!(back.nodes.len(), tree.nodes.len());
        for (a, b) in back.nodes.iter().zip(&tree.nodes) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.prob, b.prob);
            assert_eq!(a.group, b.group);
            assert!(a.params.is_none());
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = toy_spec(vec![2, 2]);
        spec.branchiness = vec![];
        assert!(build_tree(&spec, &LloydConfig::default()).is_err());
        let mut spec = toy_spec(vec![2, 0]);
        spec.threshold = 0.5;
        assert!(build_tree(&spec, &LloydConfig::default()).is_err());
        let mut spec = toy_spec(vec![2]);
        spec.threshold = 1.5;
        assert!(build_tree(&spec, &LloydConfig::default()).is_err());
        let d = FrechetParams::new(1.2, 1.0, 0.0).unwrap();
        let spec2 = BuildSpec {
            base_params: d,
            base_sample: base_sample(&FrechetParams::new(0.5, 1.0, 0.0).unwrap(), 100),
            branchiness: vec![2],
            threshold: 0.5,
            exposure: 1.0,
        };
        assert!(build_tree(&spec2, &LloydConfig::default()).is_err());
    }
}
