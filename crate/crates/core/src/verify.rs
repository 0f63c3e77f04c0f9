//! Independent oracles and bound checkers: central finite differences, a
//! brute-force check of the node-to-output parity bound, and an audit of the
//! aggregate-statistics gradient estimates against full recomputation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{reservoir_node_constraints, Reservoir};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::forest::{node_outputs, ForestShape, ObliqueForest};
use crate::gradients::{huber_grad_coeff, node_grad, task_gradient, task_loss, ForestGradient};
use crate::learner::{Learner, LearnerConfig, OnlineLearner};
use crate::stats::{AggregateStore, FairnessNotion, GroupKey};

/// Added to every theoretical bound before comparison.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Most cross-group pairs the parity check will enumerate.
pub const MAX_PAIRS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub theoretical: f64,
    pub observed: f64,
    /// `theoretical - observed`; negative when violated.
    pub slack: f64,
    pub pass: bool,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, theoretical: f64, observed: f64, tolerance: f64) -> Self {
        BoundReport {
            name: name.into(),
            theoretical,
            observed,
            slack: theoretical - observed,
            pass: observed <= theoretical + tolerance,
        }
    }
}

pub fn reports_to_json(reports: &[BoundReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

/// Central differences of `loss` along every parameter of `forest`.
pub fn finite_difference<F>(loss: F, forest: &ObliqueForest, step: f64) -> Result<ForestGradient>
where
    F: Fn(&ObliqueForest) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grad = ForestGradient::zeros(forest.shape());
    let mut probe = forest.clone();
    let sizes: Vec<usize> = forest.blocks().iter().map(|b| b.len()).collect();
    for (b, len) in sizes.into_iter().enumerate() {
        for j in 0..len {
            let orig = probe.blocks()[b][j];
            probe.blocks_mut()[b][j] = orig + step;
            let plus = loss(&probe)?;
            probe.blocks_mut()[b][j] = orig - step;
            let minus = loss(&probe)?;
            probe.blocks_mut()[b][j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical("non-finite loss during finite differences".into()));
            }
            grad.blocks_mut()[b][j] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Componentwise `|a - b| / max(|a|, |b|, floor)`, maximized.
pub fn max_relative_error(a: &ForestGradient, b: &ForestGradient, floor: f64) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks())
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor)))
        .fold(0.0, f64::max)
}

/// Magnitude below which gradient components are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Outcome of one analytic-vs-numeric task gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckTrial {
    pub seed: u64,
    pub height: usize,
    pub trees: usize,
    pub dim: usize,
    pub classes: usize,
    pub max_relative_error: f64,
    /// Disagreement between step sizes `1e-5` and `1e-6`.
    pub step_consistency: f64,
}

/// Random forest (`h <= 3`, `d <= 5`, `c <= 3`, `|T| <= 3`), input and label
/// drawn from `seed`; compares the task gradient with central differences.
/// `corrupt` perturbs one analytic component as a negative control.
pub fn gradcheck_trial(seed: u64, corrupt: bool) -> Result<GradcheckTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = rng.gen_range(1..=3);
    let trees = rng.gen_range(1..=3);
    let dim = rng.gen_range(1..=5);
    let classes = rng.gen_range(2..=3);
    let shape = ForestShape::new(height, trees, dim, classes)?;
    let mut forest = ObliqueForest::random(shape, &mut rng)?;
    for tree in forest.trees_mut() {
        tree.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        tree.leaves.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let y = rng.gen_range(0..classes);

    let mut analytic = task_gradient(&forest, &x, y)?;
    if corrupt {
        analytic.trees[0].biases[0] += 1e-2;
    }
    let loss = |f: &ObliqueForest| task_loss(f, &x, y);
    let coarse = finite_difference(loss, &forest, 1e-5)?;
    let fine = finite_difference(loss, &forest, 1e-6)?;
    Ok(GradcheckTrial {
        seed,
        height,
        trees,
        dim,
        classes,
        max_relative_error: max_relative_error(&analytic, &coarse, RELATIVE_FLOOR),
        step_consistency: max_relative_error(&coarse, &fine, RELATIVE_FLOOR),
    })
}

/// `h * 2^h * epsilon`.
pub fn dp_bound(height: usize, epsilon: f64) -> f64 {
    height as f64 * (1u64 << height) as f64 * epsilon
}

/// Per-tree gradient norm bound `sqrt(2) + 2^(h-2) * lambda * delta * B`.
pub fn tree_gradient_bound(height: usize, lambda: f64, delta: f64, input_bound: f64) -> f64 {
    2f64.sqrt() + 2f64.powi(height as i32 - 2) * lambda * delta * input_bound
}

/// Soft-output parity and the paired node-level gap of a forest on a
/// dataset with equally sized binary groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpBoundCheck {
    /// `max_{tree, node}` mean over cross-group pairs of `|n(x0) - n(x1)|`.
    pub epsilon: f64,
    /// `|| E[f | a=0] - E[f | a=1] ||` with unit-norm leaf rows.
    pub dp: f64,
    pub report: BoundReport,
}

/// Brute-force check of `DP <= h * 2^h * epsilon`. Leaf rows are scaled to
/// unit norm first; groups must have equal counts.
pub fn check_dp_bound(forest: &ObliqueForest, dataset: &[(Vec<f64>, usize)]) -> Result<DpBoundCheck> {
    let shape = forest.shape();
    let mut counts = [0usize; 2];
    for (x, a) in dataset {
        if *a > 1 {
            return Err(Error::Domain(format!("group {a} outside [0, 2)")));
        }
        if x.len() != shape.dim {
            return Err(Error::Shape(format!("input dimension: expected {}, got {}", shape.dim, x.len())));
        }
        counts[*a] += 1;
    }
    if counts[0] != counts[1] || counts[0] == 0 {
        return Err(Error::Precondition(format!("groups must be non-empty and equal, got {counts:?}")));
    }
    if counts[0] * counts[1] > MAX_PAIRS {
        return Err(Error::Precondition(format!(
            "{} cross-group pairs exceed the cap of {MAX_PAIRS}",
            counts[0] * counts[1]
        )));
    }

    let mut unit = forest.clone();
    for tree in unit.trees_mut() {
        for mut row in tree.leaves.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    let mut means = [vec![0.0; shape.classes], vec![0.0; shape.classes]];
    for (x, a) in dataset {
        for (m, f) in means[*a].iter_mut().zip(unit.forward(x)?) {
            *m += f / counts[*a] as f64;
        }
    }
    let dp = means[0].iter().zip(&means[1]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();

    // outputs[group][tree][instance][node]
    let mut outputs: [Vec<Vec<Vec<f64>>>; 2] = [vec![Vec::new(); shape.trees], vec![Vec::new(); shape.trees]];
    for (x, a) in dataset {
        for (t, tree) in unit.trees().iter().enumerate() {
            outputs[*a][t].push(node_outputs(tree, x)?.values);
        }
    }
    let pairs = (counts[0] * counts[1]) as f64;
    let sites: Vec<(usize, usize)> =
        (0..shape.trees).flat_map(|t| (0..shape.internal_nodes()).map(move |i| (t, i))).collect();
    let epsilon = sites
        .par_iter()
        .map(|&(t, i)| {
            let mut total = 0.0;
            for n0 in &outputs[0][t] {
                for n1 in &outputs[1][t] {
                    total += (n0[i] - n1[i]).abs();
                }
            }
            total / pairs
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max);

    let report = BoundReport::new("dp_bound", dp_bound(shape.height, epsilon), dp, BOUND_TOLERANCE);
    Ok(DpBoundCheck { epsilon, dp, report })
}

/// Parameters in effect when `instance` was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub forest: ObliqueForest,
    pub instance: Instance,
}

/// Runs a node-constrained learner over `instances`, recording the
/// parameters before each step.
pub fn record_trace(config: LearnerConfig, instances: &[Instance]) -> Result<Vec<TraceStep>> {
    let mut learner = Learner::new(config)?;
    let mut trace = Vec::with_capacity(instances.len());
    for inst in instances {
        trace.push(TraceStep { forest: learner.forest().clone(), instance: inst.clone() });
        learner.step(&inst.x, inst.y, inst.a)?;
    }
    Ok(trace)
}

/// Per-step maximum over nodes of `|| grad H(F) - grad H(F_hat) ||`, where
/// `F` is recomputed over the history at the step's parameters and `F_hat`
/// comes from aggregates accumulated along the trace. Bound `delta * B / 2`.
pub fn audit_estimation_error(trace: &[TraceStep], delta: f64, input_bound: f64) -> Result<Vec<BoundReport>> {
    let first = trace.first().ok_or_else(|| Error::Precondition("empty trace".into()))?;
    let shape = first.forest.shape();
    let mut store = AggregateStore::new(
        FairnessNotion::DemographicParity,
        shape.trees,
        shape.internal_nodes(),
        shape.dim,
        2,
        shape.classes,
        None,
    )?;
    let mut history = Reservoir::default();
    let theoretical = delta * input_bound / 2.0;
    let mut reports = Vec::with_capacity(trace.len());
    for (t, step) in trace.iter().enumerate() {
        if step.forest.shape() != shape {
            return Err(Error::Shape(format!("trace step {} changes the forest shape", t + 1)));
        }
        let inst = &step.instance;
        let key = GroupKey::group(inst.a);
        for (k, tree) in step.forest.trees().iter().enumerate() {
            for (i, n) in node_outputs(tree, &inst.x)?.values.iter().enumerate() {
                let (gw, gb) = node_grad(*n, &inst.x);
                store.update(k, i, key, *n, &gw, gb)?;
            }
        }
        history.push(inst.clone());
        let exact = reservoir_node_constraints(&history, &step.forest)?;
        let mut worst: f64 = 0.0;
        for (k, nodes) in exact.iter().enumerate() {
            for (i, truth) in nodes.iter().enumerate() {
                let est = &store.constraints(k, i)?[0];
                if truth.cold || est.cold {
                    continue;
                }
                let ct = huber_grad_coeff(truth.value, delta);
                let ce = huber_grad_coeff(est.value, delta);
                let sq: f64 = truth.grad_w.iter().zip(&est.grad_w).map(|(p, q)| (ct * p - ce * q).powi(2)).sum::<f64>()
                    + (ct * truth.grad_b - ce * est.grad_b).powi(2);
                worst = worst.max(sq.sqrt());
            }
        }
        reports.push(BoundReport::new(format!("estimation_error[{}]", t + 1), theoretical, worst, BOUND_TOLERANCE));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::TreeParams;
    use crate::gradients::HuberParams;
    use crate::optim::AdamConfig;

    fn small_forest(seed: u64) -> ObliqueForest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObliqueForest::random(ForestShape::new(2, 2, 3, 2).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn quadratic_loss_gives_parameters() {
        let forest = small_forest(1);
        let loss = |f: &ObliqueForest| Ok(f.blocks().iter().flat_map(|b| b.iter()).map(|v| 0.5 * v * v).sum());
        let g = finite_difference(loss, &forest, 1e-4).unwrap();
        for (gb, pb) in g.blocks().iter().zip(forest.blocks()) {
            for (a, b) in gb.iter().zip(pb.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_loss_gives_zero() {
        let g = finite_difference(|_| Ok(3.0), &small_forest(2), 1e-5).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn bad_step_and_nan_loss() {
        assert!(matches!(finite_difference(|_| Ok(0.0), &small_forest(3), 0.0), Err(Error::Config(_))));
        assert!(matches!(finite_difference(|_| Ok(f64::NAN), &small_forest(3), 1e-5), Err(Error::Numerical(_))));
    }

    #[test]
    fn gradcheck_detects_corruption() {
        assert!(gradcheck_trial(11, false).unwrap().max_relative_error <= 1e-4);
        assert!(gradcheck_trial(11, true).unwrap().max_relative_error > 1e-4);
    }

    #[test]
    fn zero_weight_forest_has_no_gap() {
        let shape = ForestShape::new(2, 1, 2, 2).unwrap();
        let mut tree = TreeParams::zeros(2, 2, 2);
        tree.leaves.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64);
        let forest = ObliqueForest::from_trees(shape, vec![tree]).unwrap();
        let data = vec![(vec![1.0, 2.0], 0), (vec![-3.0, 0.5], 1)];
        let check = check_dp_bound(&forest, &data).unwrap();
        assert_eq!(check.epsilon, 0.0);
        assert_eq!(check.dp, 0.0);
        assert!(check.report.pass);
    }

    #[test]
    fn unequal_groups_rejected() {
        let data = vec![(vec![0.0; 3], 0), (vec![0.0; 3], 0), (vec![0.0; 3], 1)];
        assert!(matches!(check_dp_bound(&small_forest(4), &data), Err(Error::Precondition(_))));
    }

    #[test]
    fn single_node_by_hand() {
        // w = 1, b = 0; leaves (1, 0) and (0, 1) already unit norm.
        let shape = ForestShape::new(1, 1, 1, 2).unwrap();
        let mut tree = TreeParams::zeros(1, 1, 2);
        tree.weights[[0, 0]] = 1.0;
        tree.leaves[[0, 0]] = 1.0;
        tree.leaves[[1, 1]] = 1.0;
        let forest = ObliqueForest::from_trees(shape, vec![tree]).unwrap();
        let check = check_dp_bound(&forest, &[(vec![2.0], 0), (vec![-1.0], 1)]).unwrap();
        let n0 = 1.0 / (1.0 + (-2.0f64).exp());
        let n1 = 1.0 / (1.0 + 1.0f64.exp());
        assert!((check.epsilon - (n0 - n1)).abs() < 1e-15);
        // f = (n, 1 - n): the output gap is sqrt(2) * |n0 - n1|.
        assert!((check.dp - 2f64.sqrt() * (n0 - n1)).abs() < 1e-15);
        assert!((check.report.theoretical - 2.0 * (n0 - n1)).abs() < 1e-15);
        assert!(check.report.pass);
    }

    fn audit_config(lambda: f64) -> LearnerConfig {
        LearnerConfig {
            shape: ForestShape::new(2, 2, 3, 2).unwrap(),
            huber: HuberParams::new(0.01, lambda).unwrap(),
            notion: FairnessNotion::DemographicParity,
            groups: 2,
            adam: AdamConfig::default(),
            seed: 5,
            ema: None,
        }
    }

    fn instances(n: usize) -> Vec<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        (0..n)
            .map(|k| Instance {
                x: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                y: rng.gen_range(0..2),
                a: k % 2,
            })
            .collect()
    }

    #[test]
    fn frozen_trace_has_no_error() {
        let forest = small_forest(6);
        let trace: Vec<TraceStep> =
            instances(40).into_iter().map(|instance| TraceStep { forest: forest.clone(), instance }).collect();
        for r in audit_estimation_error(&trace, 0.01, 1.0).unwrap() {
            assert!(r.observed < 1e-15, "{r:?}");
        }
    }

    #[test]
    fn one_instance_per_group_is_exact() {
        let mut trace = record_trace(audit_config(1.0), &instances(2)).unwrap();
        let reports = audit_estimation_error(&trace, 0.01, 1.0).unwrap();
        assert_eq!(reports[0].observed, 0.0);
        assert!(reports[1].pass);
        // Both samples seen at the parameters the audit evaluates.
        trace[0].forest = trace[1].forest.clone();
        let reports = audit_estimation_error(&trace, 0.01, 1.0).unwrap();
        assert!(reports[1].observed < 1e-15);
    }

    #[test]
    fn empty_trace_rejected() {
        assert!(matches!(audit_estimation_error(&[], 0.01, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn report_json_roundtrip() {
        let r = vec![BoundReport::new("x", 1.0, 0.5, 0.0)];
        let back: Vec<BoundReport> = serde_json::from_str(&reports_to_json(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back[0].slack, 0.5);
    }
}
