//! Straight-line reference computations used as oracles. They share no code
//! with the library beyond its data types.
#![allow(dead_code)]

use fairforest::data::{generate_synthetic, rescale_to_bound, Instance, SyntheticConfig};
use fairforest::forest::{ObliqueForest, TreeParams};
use fairforest::gradients::ForestGradient;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn nodes(tree: &TreeParams, x: &[f64]) -> Vec<f64> {
    (0..tree.biases.len())
        .map(|i| {
            let mut z = tree.biases[i];
            for (j, xj) in x.iter().enumerate() {
                z += tree.weights[[i, j]] * xj;
            }
            sigmoid(z)
        })
        .collect()
}

/// Root-to-leaf walk: `(node, went_left)` per level.
pub fn path(height: usize, leaf: usize) -> Vec<(usize, bool)> {
    let mut node = 0;
    let mut out = Vec::with_capacity(height);
    for depth in 0..height {
        let right = (leaf >> (height - 1 - depth)) & 1 == 1;
        out.push((node, !right));
        node = 2 * node + if right { 2 } else { 1 };
    }
    out
}

fn height_of(tree: &TreeParams) -> usize {
    tree.leaves.nrows().trailing_zeros() as usize
}

pub fn leaf_probs(tree: &TreeParams, x: &[f64]) -> Vec<f64> {
    let n = nodes(tree, x);
    let h = height_of(tree);
    (0..1usize << h)
        .map(|l| path(h, l).iter().map(|(i, left)| if *left { n[*i] } else { 1.0 - n[*i] }).product())
        .collect()
}

pub fn forward(forest: &ObliqueForest, x: &[f64]) -> Vec<f64> {
    let c = forest.shape().classes;
    let mut f = vec![0.0; c];
    for tree in forest.trees() {
        for (l, p) in leaf_probs(tree, x).iter().enumerate() {
            for k in 0..c {
                f[k] += p * tree.leaves[[l, k]];
            }
        }
    }
    let t = forest.trees().len() as f64;
    f.iter().map(|v| v / t).collect()
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn argmax_low(f: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..f.len() {
        if f[k] > f[best] {
            best = k;
        }
    }
    best
}

/// Cross-entropy gradient using `dp_l/dz_i = p_l (1 - n_i)` on a left turn and
/// `-p_l n_i` on a right turn (no division by node outputs).
pub fn task_grad(forest: &ObliqueForest, x: &[f64], y: usize) -> ForestGradient {
    let shape = forest.shape();
    let mut r = softmax(&forward(forest, x));
    r[y] -= 1.0;
    let t = shape.trees as f64;
    let mut g = ForestGradient::zeros(shape);
    for (tree, tg) in forest.trees().iter().zip(g.trees.iter_mut()) {
        let n = nodes(tree, x);
        let p = leaf_probs(tree, x);
        for l in 0..shape.leaves() {
            let mut theta_r = 0.0;
            for k in 0..shape.classes {
                tg.leaves[[l, k]] = p[l] * r[k] / t;
                theta_r += tree.leaves[[l, k]] * r[k];
            }
            for (i, left) in path(shape.height, l) {
                let dz = if left { p[l] * (1.0 - n[i]) } else { -p[l] * n[i] } * theta_r / t;
                for (j, xj) in x.iter().enumerate() {
                    tg.weights[[i, j]] += dz * xj;
                }
                tg.biases[i] += dz;
            }
        }
    }
    g
}

pub fn huber_coeff(f: f64, delta: f64) -> f64 {
    if f.abs() < delta {
        f
    } else {
        let s = f - delta / 2.0;
        delta
            * if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
    }
}

pub fn huber(f: f64, delta: f64) -> f64 {
    if f.abs() < delta {
        f * f / 2.0
    } else {
        delta * (f - delta / 2.0).abs()
    }
}

/// Per-(tree, node) `F` over a binary-group history at fixed parameters.
pub fn node_gaps(forest: &ObliqueForest, history: &[(Vec<f64>, usize)]) -> Vec<Vec<f64>> {
    let c0 = history.iter().filter(|h| h.1 == 0).count() as f64;
    let c1 = history.len() as f64 - c0;
    forest
        .trees()
        .iter()
        .map(|tree| {
            let mut f = vec![0.0; tree.biases.len()];
            for (x, a) in history {
                let sign = if *a == 0 { 1.0 / c0 } else { -1.0 / c1 };
                for (fi, ni) in f.iter_mut().zip(nodes(tree, x)) {
                    *fi += sign * ni;
                }
            }
            f
        })
        .collect()
}

/// Exact batch gradient of `lambda * sum H(F_ij)` at fixed parameters.
pub fn node_fairness_grad(
    forest: &ObliqueForest,
    history: &[(Vec<f64>, usize)],
    lambda: f64,
    delta: f64,
) -> ForestGradient {
    let c0 = history.iter().filter(|h| h.1 == 0).count() as f64;
    let c1 = history.len() as f64 - c0;
    let gaps = node_gaps(forest, history);
    let mut g = ForestGradient::zeros(forest.shape());
    for ((tree, tg), f) in forest.trees().iter().zip(g.trees.iter_mut()).zip(&gaps) {
        for (x, a) in history {
            let sign = if *a == 0 { 1.0 / c0 } else { -1.0 / c1 };
            for (i, ni) in nodes(tree, x).iter().enumerate() {
                let s = lambda * huber_coeff(f[i], delta) * sign * ni * (1.0 - ni);
                for (j, xj) in x.iter().enumerate() {
                    tg.weights[[i, j]] += s * xj;
                }
                tg.biases[i] += s;
            }
        }
    }
    g
}

pub fn flat(g: &ForestGradient) -> Vec<f64> {
    g.blocks().iter().flat_map(|b| b.iter().copied()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// The default synthetic stream with inputs scaled to `||x|| <= 1`.
pub fn standard_stream() -> Vec<Instance> {
    let mut data: Vec<Instance> =
        generate_synthetic(&SyntheticConfig::default()).unwrap().map(Result::unwrap).collect();
    rescale_to_bound(&mut data, 1.0);
    data
}
