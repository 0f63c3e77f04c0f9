//! Soft-routed oblique decision trees and forests.
//!
//! Every tree is a complete binary tree of height `h` with `m = 2^h - 1`
//! internal nodes stored in breadth-first order (node `j` at depth `i` lives
//! at flat index `2^i - 1 + j`) and `2^h` leaves. An internal node routes an
//! input to its left child with probability `logistic(w·x + b)` and to its
//! right child with the complementary probability; the tree output is the
//! probability-weighted mix of the leaf rows, and the forest output is the
//! plain mean over trees.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};

pub const MAX_HEIGHT: usize = 16;

/// Path products switch to log space once any factor drops below this.
const LOG_SPACE_THRESHOLD: f64 = 1e-12;

/// Dimensions shared by every tree of a forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestShape {
    pub height: usize,
    pub trees: usize,
    pub dim: usize,
    pub classes: usize,
}

impl ForestShape {
    pub fn new(height: usize, trees: usize, dim: usize, classes: usize) -> Result<Self> {
        let shape = ForestShape { height, trees, dim, classes };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.height > MAX_HEIGHT {
            return Err(Error::Config(format!("tree height must be in [1, {MAX_HEIGHT}], got {}", self.height)));
        }
        if self.trees == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("output dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn internal_nodes(&self) -> usize {
        (1usize << self.height) - 1
    }

    pub fn leaves(&self) -> usize {
        1usize << self.height
    }

    /// Number of trainable scalars in one tree.
    pub fn params_per_tree(&self) -> usize {
        self.internal_nodes() * (self.dim + 1) + self.leaves() * self.classes
    }
}

/// One step of a root-to-leaf path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub node: usize,
    pub left: bool,
}

/// Ancestor mask of a complete binary tree.
///
/// Entry `(i, l)` is `+1` when leaf `l` lies in the left subtree of node `i`,
/// `-1` when it lies in the right subtree and `0` otherwise. The dense matrix
/// is `(2^h - 1) x 2^h`, so it is materialized only on request; routing uses
/// the per-leaf path table instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AncestorMask {
    height: usize,
    paths: Vec<PathStep>,
}

/// Builds the ancestor mask for a tree of height `h`.
pub fn build_mask(h: usize) -> Result<AncestorMask> {
    if h == 0 || h > MAX_HEIGHT {
        return Err(Error::Config(format!("mask height must be in [1, {MAX_HEIGHT}], got {h}")));
    }
    let leaves = 1usize << h;
    let mut paths = Vec::with_capacity(leaves * h);
    for leaf in 0..leaves {
        // The leaf sits at heap position 2^h + leaf (1-based); its ancestor at
        // depth k is that position shifted right by h - k.
        let pos = leaves + leaf;
        for depth in 0..h {
            let ancestor = pos >> (h - depth);
            let went_right = (pos >> (h - depth - 1)) & 1 == 1;
            paths.push(PathStep { node: ancestor - 1, left: !went_right });
        }
    }
    Ok(AncestorMask { height: h, paths })
}

impl AncestorMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rows(&self) -> usize {
        (1usize << self.height) - 1
    }

    pub fn cols(&self) -> usize {
        1usize << self.height
    }

    /// Root-to-leaf path of `leaf`, one step per depth.
    pub fn path(&self, leaf: usize) -> &[PathStep] {
        &self.paths[leaf * self.height..(leaf + 1) * self.height]
    }

    /// Closed-form entry: with `l = floor(log2(i + 1))` and `s = 2^(h-l)`,
    /// the leaf `j` is left of node `i` iff `s(i+1) <= 2^h + j < s(i+1) + s/2`
    /// and right of it iff `s(i+1) + s/2 <= 2^h + j < s(i+1) + s`.
    pub fn entry(&self, node: usize, leaf: usize) -> i8 {
        let h = self.height;
        let level = usize::BITS as usize - 1 - (node + 1).leading_zeros() as usize;
        let span = 1usize << (h - level);
        let start = span * (node + 1);
        let pos = (1usize << h) + leaf;
        if pos >= start && pos < start + span / 2 {
            1
        } else if pos >= start + span / 2 && pos < start + span {
            -1
        } else {
            0
        }
    }

    /// Dense `(2^h - 1) x 2^h` matrix of entries.
    pub fn to_dense(&self) -> Array2<i8> {
        Array2::from_shape_fn((self.rows(), self.cols()), |(i, l)| self.entry(i, l))
    }
}

/// Parameters of one soft-routed oblique tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub height: usize,
    /// One row per internal node, breadth-first.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    /// One row per leaf.
    pub leaves: Array2<f64>,
}

impl TreeParams {
    pub fn zeros(height: usize, dim: usize, classes: usize) -> Self {
        let m = (1usize << height) - 1;
        TreeParams {
            height,
            weights: Array2::zeros((m, dim)),
            biases: Array1::zeros(m),
            leaves: Array2::zeros((1usize << height, classes)),
        }
    }

    /// Weights uniform in `[-1/sqrt(d), 1/sqrt(d)]`, zero biases, leaf rows
    /// uniform in `[-0.1, 0.1]`.
    pub fn random<R: Rng + ?Sized>(height: usize, dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut tree = TreeParams::zeros(height, dim, classes);
        let bound = 1.0 / (dim as f64).sqrt();
        tree.weights.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        tree.leaves.mapv_inplace(|_| rng.gen_range(-0.1..=0.1));
        tree
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn classes(&self) -> usize {
        self.leaves.ncols()
    }

    pub fn internal_nodes(&self) -> usize {
        self.weights.nrows()
    }

    fn check(&self) -> Result<()> {
        let m = (1usize << self.height) - 1;
        shape_check("weight rows", m, self.weights.nrows())?;
        shape_check("bias length", m, self.biases.len())?;
        shape_check("leaf rows", m + 1, self.leaves.nrows())?;
        let finite = self.weights.iter().chain(self.biases.iter()).chain(self.leaves.iter());
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("tree parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Node routing probabilities of one tree for one input, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutputs {
    pub values: Vec<f64>,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `logistic(w_i · x + b_i)` for every internal node.
pub fn node_outputs(tree: &TreeParams, x: &[f64]) -> Result<NodeOutputs> {
    shape_check("input dimension", tree.dim(), x.len())?;
    let values = tree
        .weights
        .rows()
        .into_iter()
        .zip(tree.biases.iter())
        .map(|(w, b)| {
            let z = w.iter().zip(x).fold(*b, |acc, (wi, xi)| acc + wi * xi);
            logistic(z)
        })
        .collect();
    Ok(NodeOutputs { values })
}

/// Routing factor contributed by one path step.
#[inline]
pub(crate) fn route_factor(n: f64, left: bool) -> f64 {
    if left {
        n
    } else {
        1.0 - n
    }
}

/// Product of routing factors along a path, optionally skipping one node.
pub(crate) fn path_product(outputs: &[f64], path: &[PathStep], skip: Option<usize>) -> f64 {
    let mut direct = 1.0;
    let mut tiny = false;
    for step in path {
        if Some(step.node) == skip {
            continue;
        }
        let f = route_factor(outputs[step.node], step.left);
        tiny |= f < LOG_SPACE_THRESHOLD;
        direct *= f;
    }
    if !tiny {
        return direct;
    }
    let log_sum: f64 =
        path.iter().filter(|s| Some(s.node) != skip).map(|s| route_factor(outputs[s.node], s.left).ln()).sum();
    log_sum.exp()
}

/// Probability of reaching each leaf.
pub fn leaf_probabilities(outputs: &NodeOutputs, mask: &AncestorMask) -> Result<Vec<f64>> {
    shape_check("node outputs", mask.rows(), outputs.values.len())?;
    Ok((0..mask.cols()).map(|l| path_product(&outputs.values, mask.path(l), None)).collect())
}

/// Intermediate values of one tree's forward pass.
#[derive(Debug, Clone)]
pub struct TreePass {
    pub nodes: NodeOutputs,
    pub leaf_probs: Vec<f64>,
    pub output: Vec<f64>,
}

/// Intermediate values of a forest forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub trees: Vec<TreePass>,
    /// Mean of the per-tree outputs.
    pub output: Vec<f64>,
}

/// An ensemble of equally shaped soft-routed oblique trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ForestRepr", into = "ForestRepr")]
pub struct ObliqueForest {
    shape: ForestShape,
    trees: Vec<TreeParams>,
    mask: AncestorMask,
}

#[derive(Serialize, Deserialize)]
struct ForestRepr {
    shape: ForestShape,
    trees: Vec<TreeParams>,
}

impl TryFrom<ForestRepr> for ObliqueForest {
    type Error = Error;

    fn try_from(repr: ForestRepr) -> Result<Self> {
        ObliqueForest::from_trees(repr.shape, repr.trees)
    }
}

impl From<ObliqueForest> for ForestRepr {
    fn from(forest: ObliqueForest) -> Self {
        ForestRepr { shape: forest.shape, trees: forest.trees }
    }
}

impl ObliqueForest {
    pub fn from_trees(shape: ForestShape, trees: Vec<TreeParams>) -> Result<Self> {
        shape.validate()?;
        shape_check("tree count", shape.trees, trees.len())?;
        for tree in &trees {
            shape_check("tree height", shape.height, tree.height)?;
            shape_check("tree input dimension", shape.dim, tree.dim())?;
            shape_check("tree output dimension", shape.classes, tree.classes())?;
            tree.check()?;
        }
        Ok(ObliqueForest { shape, trees, mask: build_mask(shape.height)? })
    }

    pub fn random<R: Rng + ?Sized>(shape: ForestShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let trees = (0..shape.trees).map(|_| TreeParams::random(shape.height, shape.dim, shape.classes, rng)).collect();
        Self::from_trees(shape, trees)
    }

    pub fn shape(&self) -> ForestShape {
        self.shape
    }

    pub fn trees(&self) -> &[TreeParams] {
        &self.trees
    }

    pub fn trees_mut(&mut self) -> &mut [TreeParams] {
        &mut self.trees
    }

    pub fn mask(&self) -> &AncestorMask {
        &self.mask
    }

    /// Forward pass keeping every intermediate needed for backpropagation.
    pub fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data { row: 0, msg: "input contains non-finite values".into() });
        }
        let c = self.shape.classes;
        let mut output = vec![0.0; c];
        let mut passes = Vec::with_capacity(self.trees.len());
        for tree in &self.trees {
            let nodes = node_outputs(tree, x)?;
            let leaf_probs = leaf_probabilities(&nodes, &self.mask)?;
            let mut tree_out = vec![0.0; c];
            for (p, row) in leaf_probs.iter().zip(tree.leaves.rows()) {
                for (o, theta) in tree_out.iter_mut().zip(row.iter()) {
                    *o += p * theta;
                }
            }
            for (o, t) in output.iter_mut().zip(&tree_out) {
                *o += t;
            }
            passes.push(TreePass { nodes, leaf_probs, output: tree_out });
        }
        let inv = 1.0 / self.trees.len() as f64;
        output.iter_mut().for_each(|o| *o *= inv);
        Ok(ForwardPass { trees: passes, output })
    }

    /// Forest output `f(x)`: mean over trees of `sum_l p_l(x) theta_l`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_pass(x)?.output)
    }

    /// Class with the largest output; ties resolve to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Visits every parameter block (weights, biases, leaves per tree).
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.trees
            .iter()
            .flat_map(|t| {
                [
                    t.weights.as_slice().expect("standard layout"),
                    t.biases.as_slice().expect("standard layout"),
                    t.leaves.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.trees
            .iter_mut()
            .flat_map(|t| {
                [
                    t.weights.as_slice_mut().expect("standard layout"),
                    t.biases.as_slice_mut().expect("standard layout"),
                    t.leaves.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
