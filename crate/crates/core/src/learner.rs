//! The online loop: predict, receive `(y, a)`, update aggregates, compute
//! the regularized gradient, take one Adam step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{leaf_fairness_gradient, reservoir_fairness_gradient, LeafStore, Reservoir};
use crate::data::Instance;
use crate::error::{shape_check, Error, Result};
use crate::forest::{argmax, softmax, ForestShape, ForwardPass, ObliqueForest};
use crate::gradients::{
    fairness_gradient, gradient_norm, node_grad, task_gradient_from_pass, total_gradient, ForestGradient, HuberParams,
};
use crate::optim::{AdamConfig, AdamState};
use crate::stats::{AggregateStore, FairnessNotion};

/// Where the fairness constraints are imposed and how their expectations
/// are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSite {
    /// Node-level constraints from aggregate statistics.
    Node,
    /// Leaf-probability constraints from aggregate statistics.
    Leaf,
    /// Node-level constraints recomputed from the stored history.
    Reservoir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub shape: ForestShape,
    pub huber: HuberParams,
    pub notion: FairnessNotion,
    pub groups: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Optional floor on the running-mean step weight; off by default.
    pub ema: Option<f64>,
}

impl LearnerConfig {
    /// Three trees of height 4, `delta = 0.01`, Adam at `2e-3`.
    pub fn new(dim: usize, classes: usize, lambda: f64) -> Result<Self> {
        Ok(LearnerConfig {
            shape: ForestShape::new(4, 3, dim, classes)?,
            huber: HuberParams::new(0.01, lambda)?,
            notion: FairnessNotion::DemographicParity,
            groups: 2,
            adam: AdamConfig::default(),
            seed: 0,
            ema: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        HuberParams::new(self.huber.delta, self.huber.lambda)?;
        self.adam.validate()?;
        if self.groups < 2 {
            return Err(Error::Config("need at least two protected groups".into()));
        }
        if self.shape.classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        Ok(())
    }
}

/// Running accuracy and demographic parity over every prediction so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTracker {
    total: u64,
    correct: u64,
    group_counts: Vec<u64>,
    group_pred_sum: Vec<f64>,
    group_soft_sum: Vec<f64>,
}

impl MetricsTracker {
    pub fn new(groups: usize) -> Self {
        MetricsTracker {
            total: 0,
            correct: 0,
            group_counts: vec![0; groups],
            group_pred_sum: vec![0.0; groups],
            group_soft_sum: vec![0.0; groups],
        }
    }

    /// Records one hard prediction and its soft score (expected label).
    pub fn record(&mut self, pred: usize, y: usize, a: usize, soft: f64) {
        self.total += 1;
        self.correct += u64::from(pred == y);
        self.group_counts[a] += 1;
        self.group_pred_sum[a] += pred as f64;
        self.group_soft_sum[a] += soft;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn correct(&self) -> u64 {
        self.correct
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn group_counts(&self) -> &[u64] {
        &self.group_counts
    }

    /// Mean predicted label per group (positive rate for binary tasks).
    pub fn group_rates(&self) -> Vec<Option<f64>> {
        rates(&self.group_pred_sum, &self.group_counts)
    }

    pub fn dp_hard(&self) -> Option<f64> {
        parity_gap(&self.group_pred_sum, &self.group_counts)
    }

    pub fn dp_soft(&self) -> Option<f64> {
        parity_gap(&self.group_soft_sum, &self.group_counts)
    }
}

fn rates(sums: &[f64], counts: &[u64]) -> Vec<Option<f64>> {
    sums.iter().zip(counts).map(|(s, c)| (*c > 0).then(|| s / *c as f64)).collect()
}

/// `|r0 - r1|` for two groups; `max_k |overall - r_k|` for more.
fn parity_gap(sums: &[f64], counts: &[u64]) -> Option<f64> {
    let observed = counts.iter().filter(|c| **c > 0).count();
    if observed < 2 {
        return None;
    }
    let r = rates(sums, counts);
    if counts.len() == 2 {
        return Some((r[0]? - r[1]?).abs());
    }
    let total: u64 = counts.iter().sum();
    let overall = sums.iter().sum::<f64>() / total as f64;
    r.iter().flatten().map(|rk| (overall - rk).abs()).reduce(f64::max)
}

/// Demographic parity of the retained hard predictions, if defined.
pub fn dp_metric(tracker: &MetricsTracker) -> Option<f64> {
    tracker.dp_hard()
}

/// One trajectory row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub y: usize,
    pub a: usize,
    pub pred: usize,
    pub running_accuracy: f64,
    pub dp_hard: Option<f64>,
    pub dp_soft: Option<f64>,
    pub grad_norm_total: f64,
    pub grad_norm_fair: f64,
}

/// A model trained one instance at a time under the online protocol.
pub trait OnlineLearner {
    /// Predicts on `x`, then learns from the revealed `(y, a)`.
    fn step(&mut self, x: &[f64], y: usize, a: usize) -> Result<StepRecord>;

    fn predict(&self, x: &[f64]) -> Result<usize>;

    fn metrics(&self) -> &MetricsTracker;

    fn checkpoint_json(&self) -> Result<String>;

    /// Approximate bytes of model and estimator state.
    fn state_bytes(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Estimator {
    Node(AggregateStore),
    Leaf(LeafStore),
    Reservoir(Reservoir),
}

/// Soft-routed oblique forest trained online with fairness regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    config: LearnerConfig,
    site: ConstraintSite,
    forest: ObliqueForest,
    adam: AdamState,
    estimator: Estimator,
    metrics: MetricsTracker,
    step: u64,
    #[serde(skip)]
    last: Option<(ForestGradient, ForestGradient)>,
}

impl Learner {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        Self::with_site(config, ConstraintSite::Node)
    }

    pub fn with_site(config: LearnerConfig, site: ConstraintSite) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let forest = ObliqueForest::random(config.shape, &mut rng)?;
        Self::from_forest(config, site, forest)
    }

    /// Starts from given parameters instead of a seeded initialization.
    pub fn from_forest(config: LearnerConfig, site: ConstraintSite, forest: ObliqueForest) -> Result<Self> {
        config.validate()?;
        if forest.shape() != config.shape {
            return Err(Error::Shape("forest shape differs from the configuration".into()));
        }
        let shape = config.shape;
        if site != ConstraintSite::Node
            && !matches!(config.notion, FairnessNotion::DemographicParity | FairnessNotion::None)
        {
            return Err(Error::Config(format!("{site:?} constraints support demographic parity only")));
        }
        let estimator = match site {
            ConstraintSite::Node => Estimator::Node(AggregateStore::new(
                config.notion,
                shape.trees,
                shape.internal_nodes(),
                shape.dim,
                config.groups,
                shape.classes,
                config.ema,
            )?),
            ConstraintSite::Leaf => Estimator::Leaf(LeafStore::new(shape, config.groups)?),
            ConstraintSite::Reservoir => Estimator::Reservoir(Reservoir::default()),
        };
        let sizes: Vec<usize> = forest.blocks().iter().map(|b| b.len()).collect();
        Ok(Learner {
            adam: AdamState::new(config.adam, &sizes)?,
            metrics: MetricsTracker::new(config.groups),
            config,
            site,
            forest,
            estimator,
            step: 0,
            last: None,
        })
    }

    pub fn from_checkpoint(json: &str) -> Result<Self> {
        let learner: Learner = serde_json::from_str(json)?;
        learner.config.validate()?;
        Ok(learner)
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn site(&self) -> ConstraintSite {
        self.site
    }

    pub fn forest(&self) -> &ObliqueForest {
        &self.forest
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Aggregate store, when node-level constraints are in use.
    pub fn store(&self) -> Option<&AggregateStore> {
        match &self.estimator {
            Estimator::Node(s) => Some(s),
            _ => None,
        }
    }

    /// `(total, fairness)` gradients applied by the most recent step.
    pub fn last_gradients(&self) -> Option<&(ForestGradient, ForestGradient)> {
        self.last.as_ref()
    }

    fn validate_instance(&self, x: &[f64], y: usize, a: usize) -> Result<()> {
        shape_check("input dimension", self.config.shape.dim, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data { row: self.step as usize + 1, msg: "non-finite feature".into() });
        }
        if y >= self.config.shape.classes {
            return Err(Error::Domain(format!("label {y} outside [0, {})", self.config.shape.classes)));
        }
        if a >= self.config.groups {
            return Err(Error::Domain(format!("group {a} outside [0, {})", self.config.groups)));
        }
        Ok(())
    }

    fn observe(&mut self, pass: &ForwardPass, x: &[f64], y: usize, a: usize) -> Result<()> {
        match &mut self.estimator {
            Estimator::Node(store) => {
                let key = store.key_for(y, a);
                for (t, tp) in pass.trees.iter().enumerate() {
                    for (i, n) in tp.nodes.values.iter().enumerate() {
                        let (gw, gb) = node_grad(*n, x);
                        store.update(t, i, key, *n, &gw, gb)?;
                    }
                }
                Ok(())
            }
            Estimator::Leaf(store) => store.observe(&self.forest, pass, x, a),
            Estimator::Reservoir(res) => {
                res.push(Instance { x: x.to_vec(), y, a });
                Ok(())
            }
        }
    }

    fn fairness(&self) -> Result<ForestGradient> {
        let shape = self.config.shape;
        if self.config.notion == FairnessNotion::None {
            return Ok(ForestGradient::zeros(shape));
        }
        let fair = match &self.estimator {
            Estimator::Node(store) => fairness_gradient(store, self.config.huber, shape)?,
            Estimator::Leaf(store) => leaf_fairness_gradient(store, &self.forest, self.config.huber)?,
            Estimator::Reservoir(res) => reservoir_fairness_gradient(res, &self.forest, self.config.huber)?,
        };
        Ok(fair.gradient)
    }
}

/// Expected label under `softmax(logits)`; the positive-class probability
/// for binary tasks.
pub fn soft_score(logits: &[f64]) -> f64 {
    softmax(logits).iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

impl OnlineLearner for Learner {
    fn step(&mut self, x: &[f64], y: usize, a: usize) -> Result<StepRecord> {
        self.validate_instance(x, y, a)?;
        let pass = self.forest.forward_pass(x)?;
        let pred = argmax(&pass.output);
        self.metrics.record(pred, y, a, soft_score(&pass.output));

        self.observe(&pass, x, y, a)?;
        let task = task_gradient_from_pass(&self.forest, &pass, x, y)?;
        let fair = self.fairness()?;
        let total = total_gradient(&task, &fair)?;
        if !total.is_finite() {
            return Err(Error::Numerical("non-finite total gradient".into()));
        }
        self.adam.apply(self.forest.blocks_mut(), total.blocks())?;
        self.step += 1;

        let record = StepRecord {
            step: self.step,
            y,
            a,
            pred,
            running_accuracy: self.metrics.accuracy(),
            dp_hard: self.metrics.dp_hard(),
            dp_soft: self.metrics.dp_soft(),
            grad_norm_total: gradient_norm(&total),
            grad_norm_fair: gradient_norm(&fair),
        };
        self.last = Some((total, fair));
        Ok(record)
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        self.forest.predict(x)
    }

    fn metrics(&self) -> &MetricsTracker {
        &self.metrics
    }

    fn checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    fn state_bytes(&self) -> usize {
        let params: usize = self.forest.blocks().iter().map(|b| b.len()).sum();
        let estimator = match &self.estimator {
            Estimator::Node(s) => s.footprint_bytes(),
            Estimator::Leaf(s) => s.footprint_bytes(),
            Estimator::Reservoir(r) => r.footprint_bytes(),
        };
        params * 3 * std::mem::size_of::<f64>() + estimator
    }
}

/// Feeds a stream through `learner`, handing each row to `sink`. Errors
/// carry the 1-based index of the failing step.
pub fn run_stream_with<L, I, F>(learner: &mut L, stream: I, mut sink: F) -> Result<u64>
where
    L: OnlineLearner + ?Sized,
    I: IntoIterator<Item = Result<Instance>>,
    F: FnMut(&StepRecord) -> Result<()>,
{
    let mut count = 0u64;
    for (idx, inst) in stream.into_iter().enumerate() {
        let at = |e: Error| Error::AtStep { step: idx + 1, source: Box::new(e) };
        let inst = inst.map_err(at)?;
        let rec = learner.step(&inst.x, inst.y, inst.a).map_err(at)?;
        sink(&rec)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Precondition("empty stream".into()));
    }
    Ok(count)
}

/// Runs a whole stream and collects the trajectory.
pub fn run_stream<L, I>(learner: &mut L, stream: I) -> Result<Vec<StepRecord>>
where
    L: OnlineLearner + ?Sized,
    I: IntoIterator<Item = Result<Instance>>,
{
    let mut rows = Vec::new();
    run_stream_with(learner, stream, |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok(rows)
}
