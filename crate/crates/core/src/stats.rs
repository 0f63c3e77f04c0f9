//! Per-node, per-group running means of node outputs and node gradients.
//!
//! The store holds, for every (tree, node), one aggregate per group (or per
//! class/group cell under equalized odds) plus an unconditioned aggregate.
//! Group-conditional expectations of node outputs and of their parameter
//! gradients are read straight off these means, so fairness gradients never
//! need the raw history.

use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};

/// Which group-fairness constraint drives the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessNotion {
    None,
    #[serde(rename = "dp")]
    DemographicParity,
    #[serde(rename = "eo")]
    EqualizedOdds,
    #[serde(rename = "multi")]
    MultiGroup,
}

impl std::str::FromStr for FairnessNotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FairnessNotion::None),
            "dp" => Ok(FairnessNotion::DemographicParity),
            "eo" | "equalized_odds" => Ok(FairnessNotion::EqualizedOdds),
            "multi" | "multigroup" => Ok(FairnessNotion::MultiGroup),
            other => Err(Error::Config(format!("unknown fairness notion {other:?}"))),
        }
    }
}

impl std::fmt::Display for FairnessNotion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FairnessNotion::None => "none",
            FairnessNotion::DemographicParity => "dp",
            FairnessNotion::EqualizedOdds => "eo",
            FairnessNotion::MultiGroup => "multi",
        })
    }
}

/// Protected group, optionally conditioned on the true task label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupKey {
    pub group: usize,
    pub class_condition: Option<usize>,
}

impl GroupKey {
    pub fn group(group: usize) -> Self {
        GroupKey { group, class_condition: None }
    }

    pub fn conditioned(group: usize, class: usize) -> Self {
        GroupKey { group, class_condition: Some(class) }
    }
}

/// Running means of one node's output and gradient for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAggregate {
    pub count: u64,
    pub mean_output: f64,
    pub mean_grad_w: Vec<f64>,
    pub mean_grad_b: f64,
}

impl NodeAggregate {
    pub fn new(dim: usize) -> Self {
        NodeAggregate { count: 0, mean_output: 0.0, mean_grad_w: vec![0.0; dim], mean_grad_b: 0.0 }
    }

    /// `mean <- mean + (value - mean) / count`. With `ema` set, the step
    /// weight never falls below it.
    pub fn push(&mut self, n_value: f64, grad_w: &[f64], grad_b: f64, ema: Option<f64>) {
        self.count += 1;
        let mut rate = 1.0 / self.count as f64;
        if let Some(floor) = ema {
            rate = rate.max(floor);
        }
        self.mean_output += (n_value - self.mean_output) * rate;
        for (m, g) in self.mean_grad_w.iter_mut().zip(grad_w) {
            *m += (g - *m) * rate;
        }
        self.mean_grad_b += (grad_b - self.mean_grad_b) * rate;
    }

    pub fn is_cold(&self) -> bool {
        self.count == 0
    }
}

/// A value that may be unavailable because one side has no observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T> {
    pub value: T,
    pub cold: bool,
}

/// Difference of two aggregates: the constraint value and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEstimate {
    pub value: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
    pub cold: bool,
}

impl ConstraintEstimate {
    fn between(lhs: &NodeAggregate, rhs: &NodeAggregate) -> Self {
        if lhs.is_cold() || rhs.is_cold() {
            return ConstraintEstimate {
                value: 0.0,
                grad_w: vec![0.0; lhs.mean_grad_w.len()],
                grad_b: 0.0,
                cold: true,
            };
        }
        ConstraintEstimate {
            value: lhs.mean_output - rhs.mean_output,
            grad_w: lhs.mean_grad_w.iter().zip(&rhs.mean_grad_w).map(|(a, b)| a - b).collect(),
            grad_b: lhs.mean_grad_b - rhs.mean_grad_b,
            cold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeCells {
    cells: Vec<NodeAggregate>,
    overall: NodeAggregate,
}

/// Aggregate statistics for every node of every tree.
///
/// JSON snapshot layout:
/// `{"notion", "groups", "classes", "dim", "ema", "trees": [[{"cells": [..], "overall": {..}}]]}`
/// where `trees[t][i]` is node `i` of tree `t` and each aggregate is
/// `{"count", "mean_output", "mean_grad_w", "mean_grad_b"}`. Cells are indexed
/// by `group` (or `class * groups + group` under equalized odds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStore {
    notion: FairnessNotion,
    groups: usize,
    classes: usize,
    dim: usize,
    ema: Option<f64>,
    trees: Vec<Vec<NodeCells>>,
}

impl AggregateStore {
    pub fn new(
        notion: FairnessNotion,
        trees: usize,
        nodes: usize,
        dim: usize,
        groups: usize,
        classes: usize,
        ema: Option<f64>,
    ) -> Result<Self> {
        if groups < 2 {
            return Err(Error::Config(format!("need at least two groups, got {groups}")));
        }
        if notion == FairnessNotion::DemographicParity && groups != 2 {
            return Err(Error::Config(format!(
                "demographic parity takes a binary protected attribute, got {groups} groups"
            )));
        }
        if notion == FairnessNotion::EqualizedOdds && groups != 2 {
            return Err(Error::Config("equalized odds takes a binary protected attribute".into()));
        }
        if let Some(rate) = ema {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::Config(format!("ema rate must be in (0, 1), got {rate}")));
            }
        }
        let per_node = if notion == FairnessNotion::EqualizedOdds { groups * classes } else { groups };
        let node = NodeCells { cells: vec![NodeAggregate::new(dim); per_node], overall: NodeAggregate::new(dim) };
        Ok(AggregateStore { notion, groups, classes, dim, ema, trees: vec![vec![node; nodes]; trees] })
    }

    pub fn notion(&self) -> FairnessNotion {
        self.notion
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn node_count(&self) -> usize {
        self.trees.first().map_or(0, Vec::len)
    }

    /// Number of stored aggregates; fixed at construction.
    pub fn len(&self) -> usize {
        self.trees.iter().flatten().map(|n| n.cells.len() + 1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Approximate heap footprint in bytes.
    pub fn footprint_bytes(&self) -> usize {
        self.len() * (std::mem::size_of::<NodeAggregate>() + self.dim * std::mem::size_of::<f64>())
    }

    fn cell_index(&self, key: GroupKey) -> Result<usize> {
        if key.group >= self.groups {
            return Err(Error::Domain(format!("group {} outside [0, {})", key.group, self.groups)));
        }
        match (self.notion, key.class_condition) {
            (FairnessNotion::EqualizedOdds, Some(c)) if c < self.classes => Ok(c * self.groups + key.group),
            (FairnessNotion::EqualizedOdds, Some(c)) => {
                Err(Error::Domain(format!("class {c} outside [0, {})", self.classes)))
            }
            (FairnessNotion::EqualizedOdds, None) => {
                Err(Error::Domain("equalized odds needs a class-conditioned key".into()))
            }
            (_, Some(_)) => Err(Error::Domain("class condition only applies to equalized odds".into())),
            (_, None) => Ok(key.group),
        }
    }

    fn node(&self, tree: usize, node: usize) -> Result<&NodeCells> {
        self.trees
            .get(tree)
            .and_then(|t| t.get(node))
            .ok_or_else(|| Error::Shape(format!("no node ({tree}, {node}) in store")))
    }

    /// Feeds one observation of node `(tree, node)` under `key`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        tree: usize,
        node: usize,
        key: GroupKey,
        n_value: f64,
        grad_w: &[f64],
        grad_b: f64,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&n_value) {
            return Err(Error::Domain(format!("node output {n_value} outside [0, 1]")));
        }
        shape_check("gradient length", self.dim, grad_w.len())?;
        let cell = self.cell_index(key)?;
        let ema = self.ema;
        self.node(tree, node)?;
        let slot = &mut self.trees[tree][node];
        slot.cells[cell].push(n_value, grad_w, grad_b, ema);
        slot.overall.push(n_value, grad_w, grad_b, ema);
        Ok(())
    }

    pub fn aggregate(&self, tree: usize, node: usize, key: GroupKey) -> Result<&NodeAggregate> {
        let cell = self.cell_index(key)?;
        Ok(&self.node(tree, node)?.cells[cell])
    }

    pub fn overall(&self, tree: usize, node: usize) -> Result<&NodeAggregate> {
        Ok(&self.node(tree, node)?.overall)
    }

    fn require_binary_dp(&self) -> Result<()> {
        if self.notion == FairnessNotion::EqualizedOdds || self.groups != 2 {
            return Err(Error::Config("two-group parity estimates need an unconditioned binary store".into()));
        }
        Ok(())
    }

    /// `E[n | a=0] - E[n | a=1]` for one node.
    pub fn estimate_f(&self, tree: usize, node: usize) -> Result<Estimate<f64>> {
        self.require_binary_dp()?;
        let c = self.dp_constraint(tree, node)?;
        Ok(Estimate { value: c.value, cold: c.cold })
    }

    /// `E[grad n | a=0] - E[grad n | a=1]` as `(d/dw, d/db)`.
    pub fn estimate_grad_f(&self, tree: usize, node: usize) -> Result<Estimate<(Vec<f64>, f64)>> {
        self.require_binary_dp()?;
        let c = self.dp_constraint(tree, node)?;
        Ok(Estimate { value: (c.grad_w, c.grad_b), cold: c.cold })
    }

    fn dp_constraint(&self, tree: usize, node: usize) -> Result<ConstraintEstimate> {
        let cells = &self.node(tree, node)?.cells;
        Ok(ConstraintEstimate::between(&cells[0], &cells[1]))
    }

    /// `E[n] - E[n | a=k]`.
    pub fn estimate_f_multigroup(&self, tree: usize, node: usize, k: usize) -> Result<Estimate<f64>> {
        let c = self.multigroup_constraint(tree, node, k)?;
        Ok(Estimate { value: c.value, cold: c.cold })
    }

    pub fn estimate_grad_f_multigroup(&self, tree: usize, node: usize, k: usize) -> Result<Estimate<(Vec<f64>, f64)>> {
        let c = self.multigroup_constraint(tree, node, k)?;
        Ok(Estimate { value: (c.grad_w, c.grad_b), cold: c.cold })
    }

    fn multigroup_constraint(&self, tree: usize, node: usize, k: usize) -> Result<ConstraintEstimate> {
        if self.notion == FairnessNotion::EqualizedOdds {
            return Err(Error::Config("multi-group estimates need an unconditioned store".into()));
        }
        let cell = self.cell_index(GroupKey::group(k))?;
        let slot = self.node(tree, node)?;
        Ok(ConstraintEstimate::between(&slot.overall, &slot.cells[cell]))
    }

    /// `E[n | y=c, a=0] - E[n | y=c, a=1]`.
    pub fn estimate_f_eo(&self, tree: usize, node: usize, class_c: usize) -> Result<Estimate<f64>> {
        let c = self.eo_constraint(tree, node, class_c)?;
        Ok(Estimate { value: c.value, cold: c.cold })
    }

    pub fn estimate_grad_f_eo(&self, tree: usize, node: usize, class_c: usize) -> Result<Estimate<(Vec<f64>, f64)>> {
        let c = self.eo_constraint(tree, node, class_c)?;
        Ok(Estimate { value: (c.grad_w, c.grad_b), cold: c.cold })
    }

    fn eo_constraint(&self, tree: usize, node: usize, class_c: usize) -> Result<ConstraintEstimate> {
        if self.notion != FairnessNotion::EqualizedOdds {
            return Err(Error::Config("store is not class-conditioned".into()));
        }
        let c0 = self.cell_index(GroupKey::conditioned(0, class_c))?;
        let c1 = self.cell_index(GroupKey::conditioned(1, class_c))?;
        let cells = &self.node(tree, node)?.cells;
        Ok(ConstraintEstimate::between(&cells[c0], &cells[c1]))
    }

    /// Every constraint term the configured notion defines at one node.
    pub fn constraints(&self, tree: usize, node: usize) -> Result<Vec<ConstraintEstimate>> {
        match self.notion {
            FairnessNotion::None => Ok(Vec::new()),
            FairnessNotion::DemographicParity => Ok(vec![self.dp_constraint(tree, node)?]),
            FairnessNotion::EqualizedOdds => (0..self.classes).map(|c| self.eo_constraint(tree, node, c)).collect(),
            FairnessNotion::MultiGroup => (0..self.groups).map(|k| self.multigroup_constraint(tree, node, k)).collect(),
        }
    }

    /// The cell key an observation `(y, a)` is filed under.
    pub fn key_for(&self, y: usize, a: usize) -> GroupKey {
        match self.notion {
            FairnessNotion::EqualizedOdds => GroupKey::conditioned(a, y),
            _ => GroupKey::group(a),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}
