//! Closed-form gradients of the regularized objective.
//!
//! The task term is cross-entropy over `softmax(f(x))`, backpropagated by hand
//! through leaf probabilities and node outputs. The fairness term is
//! `lambda * sum_ij H_delta(F_ij)` with `F_ij` and its gradient read from the
//! aggregate store; each constraint touches only its own node's parameters,
//! so leaf gradients of the fairness term are zero.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};
use crate::forest::{path_product, softmax, ForestShape, ForwardPass, ObliqueForest, PathStep};
use crate::stats::AggregateStore;

/// Below this distance from 0 or 1 a node's path derivative is recomputed
/// as an explicit product instead of a quotient.
const SATURATION: f64 = 1e-9;

/// Huber threshold and regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberParams {
    pub delta: f64,
    pub lambda: f64,
}

impl HuberParams {
    pub fn new(delta: f64, lambda: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(HuberParams { delta, lambda })
    }
}

/// Gradient blocks of one tree, shaped like its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeGradient {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub leaves: Array2<f64>,
}

impl TreeGradient {
    pub fn norm(&self) -> f64 {
        self.weights.iter().chain(self.biases.iter()).chain(self.leaves.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Gradient with respect to every parameter of a forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestGradient {
    pub trees: Vec<TreeGradient>,
}

impl ForestGradient {
    pub fn zeros(shape: ForestShape) -> Self {
        let m = shape.internal_nodes();
        let tree = TreeGradient {
            weights: Array2::zeros((m, shape.dim)),
            biases: Array1::zeros(m),
            leaves: Array2::zeros((shape.leaves(), shape.classes)),
        };
        ForestGradient { trees: vec![tree; shape.trees] }
    }

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

    /// Euclidean norm of each tree's block.
    pub fn tree_norms(&self) -> Vec<f64> {
        self.trees.iter().map(TreeGradient::norm).collect()
    }

    fn same_shape(&self, other: &ForestGradient) -> Result<()> {
        shape_check("gradient tree count", self.trees.len(), other.trees.len())?;
        for (a, b) in self.trees.iter().zip(&other.trees) {
            if a.weights.dim() != b.weights.dim()
                || a.biases.len() != b.biases.len()
                || a.leaves.dim() != b.leaves.dim()
            {
                return Err(Error::Shape("gradient block shapes differ".into()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of `logistic(w·x + b)` given its value `n`:
/// `(n(1-n) x, n(1-n))`.
pub fn node_grad(n_value: f64, x: &[f64]) -> (Vec<f64>, f64) {
    let slope = n_value * (1.0 - n_value);
    (x.iter().map(|xi| slope * xi).collect(), slope)
}

/// `F^2/2` for `|F| < delta`, `delta |F - delta/2|` otherwise.
pub fn huber(f: f64, delta: f64) -> f64 {
    if f.abs() < delta {
        f * f / 2.0
    } else {
        delta * (f - delta / 2.0).abs()
    }
}

/// Scalar multiplying `grad F` in the gradient of the Huber penalty:
/// `F` inside the quadratic zone, `delta * sgn(F - delta/2)` outside, with
/// `sgn(0) = 0`.
pub fn huber_grad_coeff(f: f64, delta: f64) -> f64 {
    if f.abs() < delta {
        f
    } else {
        let s = f - delta / 2.0;
        if s > 0.0 {
            delta
        } else if s < 0.0 {
            -delta
        } else {
            0.0
        }
    }
}

/// Cross-entropy `-log softmax(f(x))[y]`.
pub fn task_loss(forest: &ObliqueForest, x: &[f64], y: usize) -> Result<f64> {
    let out = forest.forward(x)?;
    check_label(y, out.len())?;
    Ok(cross_entropy(&out, y))
}

pub(crate) fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn check_label(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::Domain(format!("label {y} outside [0, {classes})")));
    }
    Ok(())
}

/// Analytic gradient of the cross-entropy task loss.
pub fn task_gradient(forest: &ObliqueForest, x: &[f64], y: usize) -> Result<ForestGradient> {
    let pass = forest.forward_pass(x)?;
    task_gradient_from_pass(forest, &pass, x, y)
}

/// Same as [`task_gradient`], reusing an existing forward pass.
pub fn task_gradient_from_pass(
    forest: &ObliqueForest,
    pass: &ForwardPass,
    x: &[f64],
    y: usize,
) -> Result<ForestGradient> {
    let shape = forest.shape();
    check_label(y, shape.classes)?;
    shape_check("input dimension", shape.dim, x.len())?;

    let mut residual = softmax(&pass.output);
    residual[y] -= 1.0;
    let inv_trees = 1.0 / shape.trees as f64;
    residual.iter_mut().for_each(|r| *r *= inv_trees);

    let mask = forest.mask();
    let mut grad = ForestGradient::zeros(shape);
    let mut d_nodes = vec![0.0; shape.internal_nodes()];
    for ((tree, tp), tg) in forest.trees().iter().zip(&pass.trees).zip(grad.trees.iter_mut()) {
        d_nodes.iter_mut().for_each(|v| *v = 0.0);
        let n = &tp.nodes.values;
        for (leaf, (p, theta)) in tp.leaf_probs.iter().zip(tree.leaves.rows()).enumerate() {
            let mut g_leaf = tg.leaves.row_mut(leaf);
            for ((g, r), _) in g_leaf.iter_mut().zip(&residual).zip(theta.iter()) {
                *g = p * r;
            }
            let value: f64 = theta.iter().zip(&residual).map(|(t, r)| t * r).sum();
            if value == 0.0 {
                continue;
            }
            let path = mask.path(leaf);
            for step in path {
                d_nodes[step.node] += leaf_partial(n, path, *step, *p) * value;
            }
        }
        for (i, dn) in d_nodes.iter().enumerate() {
            let slope = n[i] * (1.0 - n[i]);
            let coeff = dn * slope;
            for (g, xi) in tg.weights.row_mut(i).iter_mut().zip(x) {
                *g = coeff * xi;
            }
            tg.biases[i] = coeff;
        }
    }
    if !grad.is_finite() {
        return Err(Error::Numerical(format!("non-finite task gradient (output {:?}, label {y})", pass.output)));
    }
    Ok(grad)
}

/// `d p_leaf / d n_node` for a node on the leaf's path, given the leaf
/// probability `p`. Saturated nodes use the explicit product of the other
/// factors instead of dividing `p` by a vanishing factor.
pub(crate) fn leaf_partial(n: &[f64], path: &[PathStep], step: PathStep, p: f64) -> f64 {
    let ni = n[step.node];
    if ni < SATURATION || 1.0 - ni < SATURATION {
        let rest = path_product(n, path, Some(step.node));
        if step.left {
            rest
        } else {
            -rest
        }
    } else if step.left {
        p / ni
    } else {
        -p / (1.0 - ni)
    }
}

/// Fairness gradient plus whether any constraint was skipped for lack of
/// observations in some group.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessGradient {
    pub gradient: ForestGradient,
    pub cold: bool,
}

/// `lambda * sum_ij grad H_delta(F_ij)` from aggregate statistics.
pub fn fairness_gradient(store: &AggregateStore, params: HuberParams, shape: ForestShape) -> Result<FairnessGradient> {
    shape_check("store tree count", shape.trees, store.tree_count())?;
    shape_check("store node count", shape.internal_nodes(), store.node_count())?;
    shape_check("store input dimension", shape.dim, store.dim())?;
    let mut grad = ForestGradient::zeros(shape);
    let mut cold = false;
    if params.lambda == 0.0 {
        return Ok(FairnessGradient { gradient: grad, cold });
    }
    for (t, tg) in grad.trees.iter_mut().enumerate() {
        for i in 0..shape.internal_nodes() {
            for c in store.constraints(t, i)? {
                if c.cold {
                    cold = true;
                    continue;
                }
                let scale = params.lambda * huber_grad_coeff(c.value, params.delta);
                for (g, v) in tg.weights.row_mut(i).iter_mut().zip(&c.grad_w) {
                    *g += scale * v;
                }
                tg.biases[i] += scale * c.grad_b;
            }
        }
    }
    Ok(FairnessGradient { gradient: grad, cold })
}

/// Componentwise sum of two gradients.
pub fn total_gradient(task: &ForestGradient, fair: &ForestGradient) -> Result<ForestGradient> {
    task.same_shape(fair)?;
    let mut total = task.clone();
    for (dst, src) in total.blocks_mut().into_iter().zip(fair.blocks()) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    Ok(total)
}

/// Euclidean norm over every component.
pub fn gradient_norm(g: &ForestGradient) -> f64 {
    g.blocks().iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{logistic, TreeParams};
    use crate::stats::{FairnessNotion, GroupKey};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn node_grad_examples() {
        let (gw, gb) = node_grad(0.5, &[2.0, 0.0]);
        assert_eq!(gw, vec![0.5, 0.0]);
        assert_eq!(gb, 0.25);
        let (gw, gb) = node_grad(1e-12, &[1.0]);
        assert!(gw[0].abs() < 1e-11 && gb.abs() < 1e-11);
        let (_, gb) = node_grad(1.0 - 1e-12, &[1.0]);
        assert!(gb.abs() < 1e-11);
    }

    #[test]
    fn node_grad_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..50 {
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b = rng.gen_range(-1.0..1.0);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eval = |w: &[f64], b: f64| logistic(w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b);
            let n = eval(&w, b);
            let (gw, gb) = node_grad(n, &x);
            for k in 0..3 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[k] += h;
                wm[k] -= h;
                let fd = (eval(&wp, b) - eval(&wm, b)) / (2.0 * h);
                assert_abs_diff_eq!(gw[k], fd, epsilon = 1e-6);
            }
            let fd = (eval(&w, b + h) - eval(&w, b - h)) / (2.0 * h);
            assert_abs_diff_eq!(gb, fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 0.01), 0.0);
        assert_abs_diff_eq!(huber(0.005, 0.01), 1.25e-5, epsilon = 1e-18);
        assert_abs_diff_eq!(huber(0.02, 0.01), 1.5e-4, epsilon = 1e-18);
    }

    #[test]
    fn huber_branches_meet_at_delta() {
        // F²/2 at F=δ is δ²/2, the linear branch gives δ·δ/2.
        let delta = 0.01;
        for eps in [1e-6, 1e-9, 1e-12] {
            assert!((huber(delta - eps, delta) - huber(delta + eps, delta)).abs() < 1e-12 + 2.0 * delta * eps);
        }
        assert!((huber(delta - 1e-15, delta) - huber(delta, delta)).abs() < 1e-12);
    }

    #[test]
    fn huber_coeff_examples() {
        assert_eq!(huber_grad_coeff(0.0, 0.01), 0.0);
        assert_eq!(huber_grad_coeff(0.02, 0.01), 0.01);
        assert_eq!(huber_grad_coeff(-0.02, 0.01), -0.01);
        assert_eq!(huber_grad_coeff(0.004, 0.01), 0.004);
        // Exactly δ/2 is inside the quadratic zone; the kink handled by sgn(0)=0
        // is only reachable when δ/2 >= δ, i.e. never for valid δ.
        assert_eq!(huber_grad_coeff(0.005, 0.01), 0.005);
    }

    #[test]
    fn huber_coeff_is_odd() {
        for f in [-0.3, -0.01, -0.002, 0.0, 0.002, 0.01, 0.3] {
            assert_eq!(huber_grad_coeff(-f, 0.01), -huber_grad_coeff(f, 0.01));
        }
    }

    fn small_forest(seed: u64, shape: ForestShape) -> ObliqueForest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObliqueForest::random(shape, &mut rng).unwrap()
    }

    #[test]
    fn identical_leaves_give_zero_routing_gradient() {
        let shape = ForestShape::new(3, 2, 4, 3).unwrap();
        let mut forest = small_forest(2, shape);
        for tree in forest.trees_mut() {
            for mut row in tree.leaves.rows_mut() {
                row.assign(&array![0.5, -0.25, 1.0]);
            }
        }
        let g = task_gradient(&forest, &[0.3, -1.0, 2.0, 0.1], 1).unwrap();
        for t in &g.trees {
            assert!(t.weights.iter().all(|v| v.abs() < 1e-15));
            assert!(t.biases.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn one_hot_output_has_vanishing_leaf_gradient() {
        let shape = ForestShape::new(2, 1, 2, 2).unwrap();
        let mut forest = small_forest(4, shape);
        for tree in forest.trees_mut() {
            for mut row in tree.leaves.rows_mut() {
                row.assign(&array![40.0, -40.0]);
            }
        }
        let g = task_gradient(&forest, &[0.5, 0.5], 0).unwrap();
        assert!(g.trees[0].leaves.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn saturated_nodes_use_product_route() {
        // Root saturated to exactly 1.0: the quotient form would divide by 0
        // for right-descendant leaves.
        let tree = TreeParams {
            height: 2,
            weights: array![[0.0], [0.3], [-0.2]],
            biases: array![60.0, 0.1, 0.4],
            leaves: array![[0.3, -0.1], [0.2, 0.5], [-0.4, 0.1], [0.9, -0.3]],
        };
        let shape = ForestShape::new(2, 1, 1, 2).unwrap();
        let forest = ObliqueForest::from_trees(shape, vec![tree]).unwrap();
        let g = task_gradient(&forest, &[1.5], 1).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn rejects_bad_label() {
        let forest = small_forest(0, ForestShape::new(1, 1, 1, 2).unwrap());
        assert!(matches!(task_gradient(&forest, &[0.0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn fairness_gradient_zero_cases() {
        let shape = ForestShape::new(2, 1, 2, 2).unwrap();
        let mut store = AggregateStore::new(FairnessNotion::DemographicParity, 1, 3, 2, 2, 2, None).unwrap();
        for i in 0..3 {
            for a in 0..2 {
                store.update(0, i, GroupKey::group(a), 0.7, &[0.1, 0.2], 0.21).unwrap();
            }
        }
        let g = fairness_gradient(&store, HuberParams::new(0.01, 1.0).unwrap(), shape).unwrap();
        assert_eq!(gradient_norm(&g.gradient), 0.0);
        assert!(!g.cold);

        store.update(0, 1, GroupKey::group(0), 0.1, &[1.0, 1.0], 0.09).unwrap();
        let g = fairness_gradient(&store, HuberParams::new(0.01, 0.0).unwrap(), shape).unwrap();
        assert_eq!(gradient_norm(&g.gradient), 0.0);
        let g = fairness_gradient(&store, HuberParams::new(0.01, 1.0).unwrap(), shape).unwrap();
        assert!(gradient_norm(&g.gradient) > 0.0);
        assert!(g.gradient.trees[0].leaves.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cold_store_gives_zero_gradient() {
        let shape = ForestShape::new(1, 1, 1, 2).unwrap();
        let mut store = AggregateStore::new(FairnessNotion::DemographicParity, 1, 1, 1, 2, 2, None).unwrap();
        store.update(0, 0, GroupKey::group(0), 0.9, &[0.09], 0.09).unwrap();
        let g = fairness_gradient(&store, HuberParams::new(0.01, 1.0).unwrap(), shape).unwrap();
        assert!(g.cold);
        assert_eq!(gradient_norm(&g.gradient), 0.0);
    }

    #[test]
    fn total_and_norm() {
        let shape = ForestShape::new(1, 1, 1, 1).unwrap();
        let zero = ForestGradient::zeros(shape);
        let mut g = ForestGradient::zeros(shape);
        g.trees[0].weights[[0, 0]] = 3.0;
        g.trees[0].leaves[[1, 0]] = 4.0;
        assert_eq!(gradient_norm(&zero), 0.0);
        assert_eq!(gradient_norm(&g), 5.0);
        assert_eq!(total_gradient(&g, &zero).unwrap(), g);
        assert_eq!(total_gradient(&zero, &g).unwrap(), g);
        let other = ForestGradient::zeros(ForestShape::new(2, 1, 1, 1).unwrap());
        assert!(matches!(total_gradient(&g, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn huber_params_validation() {
        assert!(HuberParams::new(0.0, 1.0).is_err());
        assert!(HuberParams::new(0.01, -1.0).is_err());
        assert!(HuberParams::new(0.01, f64::NAN).is_err());
    }
}
