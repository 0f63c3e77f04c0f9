//! Comparison systems: leaf-level constraints, an MLP with a single
//! output-level constraint, a reservoir that keeps the full history, and
//! majority-label post-processing.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{shape_check, Error, Result};
use crate::forest::{argmax, node_outputs, softmax, ForestShape, ForwardPass, ObliqueForest};
use crate::gradients::{huber_grad_coeff, leaf_partial, FairnessGradient, ForestGradient, HuberParams};
use crate::learner::{soft_score, ConstraintSite, Learner, LearnerConfig, MetricsTracker, OnlineLearner, StepRecord};
use crate::optim::AdamState;
use crate::stats::{ConstraintEstimate, FairnessNotion};

/// Running mean of a fixed-length vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub count: u64,
    pub mean: Vec<f64>,
}

impl RunningMean {
    pub fn new(len: usize) -> Self {
        RunningMean { count: 0, mean: vec![0.0; len] }
    }

    pub fn push(&mut self, values: &[f64]) {
        self.count += 1;
        let rate = 1.0 / self.count as f64;
        for (m, v) in self.mean.iter_mut().zip(values) {
            *m += (v - *m) * rate;
        }
    }
}

fn require_binary(groups: usize) -> Result<()> {
    if groups != 2 {
        return Err(Error::Config(format!("this variant needs a binary protected attribute, got {groups} groups")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Leaf-level constraints

/// Per-(tree, leaf, group) running means of the leaf probability and of its
/// gradient with respect to the node parameters on the leaf's path.
///
/// Each mean vector is `[p, (d p/d w, d p/d b) for each path step]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafStore {
    shape: ForestShape,
    groups: usize,
    cells: Vec<RunningMean>,
}

impl LeafStore {
    pub fn new(shape: ForestShape, groups: usize) -> Result<Self> {
        require_binary(groups)?;
        let len = 1 + shape.height * (shape.dim + 1);
        Ok(LeafStore { shape, groups, cells: vec![RunningMean::new(len); shape.trees * shape.leaves() * groups] })
    }

    fn index(&self, tree: usize, leaf: usize, group: usize) -> usize {
        (tree * self.shape.leaves() + leaf) * self.groups + group
    }

    pub fn cell(&self, tree: usize, leaf: usize, group: usize) -> &RunningMean {
        &self.cells[self.index(tree, leaf, group)]
    }

    pub fn footprint_bytes(&self) -> usize {
        self.cells.iter().map(|c| c.mean.len() * 8 + 16).sum()
    }

    /// Feeds one instance, using a forward pass at the current parameters.
    pub fn observe(&mut self, forest: &ObliqueForest, pass: &ForwardPass, x: &[f64], a: usize) -> Result<()> {
        if a >= self.groups {
            return Err(Error::Domain(format!("group {a} outside [0, {})", self.groups)));
        }
        shape_check("input dimension", self.shape.dim, x.len())?;
        let d = self.shape.dim;
        let mask = forest.mask();
        let mut buf = vec![0.0; 1 + self.shape.height * (d + 1)];
        for (t, tp) in pass.trees.iter().enumerate() {
            let n = &tp.nodes.values;
            for (leaf, p) in tp.leaf_probs.iter().enumerate() {
                let path = mask.path(leaf);
                buf[0] = *p;
                for (k, step) in path.iter().enumerate() {
                    let ni = n[step.node];
                    let coeff = leaf_partial(n, path, *step, *p) * ni * (1.0 - ni);
                    let base = 1 + k * (d + 1);
                    for (slot, xi) in buf[base..base + d].iter_mut().zip(x) {
                        *slot = coeff * xi;
                    }
                    buf[base + d] = coeff;
                }
                let idx = self.index(t, leaf, a);
                self.cells[idx].push(&buf);
            }
        }
        Ok(())
    }
}

/// `lambda * sum_l grad H_delta(F_l)` with the signed leaf constraint
/// `F_l = E[p_l | a=0] - E[p_l | a=1]`.
pub fn leaf_fairness_gradient(
    store: &LeafStore,
    forest: &ObliqueForest,
    params: HuberParams,
) -> Result<FairnessGradient> {
    let shape = forest.shape();
    if shape != store.shape {
        return Err(Error::Shape("leaf store shape differs from the forest".into()));
    }
    let d = shape.dim;
    let mut grad = ForestGradient::zeros(shape);
    let mut cold = false;
    if params.lambda == 0.0 {
        return Ok(FairnessGradient { gradient: grad, cold });
    }
    let mask = forest.mask();
    for (t, tg) in grad.trees.iter_mut().enumerate() {
        for leaf in 0..shape.leaves() {
            let (g0, g1) = (store.cell(t, leaf, 0), store.cell(t, leaf, 1));
            if g0.count == 0 || g1.count == 0 {
                cold = true;
                continue;
            }
            let f = g0.mean[0] - g1.mean[0];
            let scale = params.lambda * huber_grad_coeff(f, params.delta);
            for (k, step) in mask.path(leaf).iter().enumerate() {
                let base = 1 + k * (d + 1);
                for (j, g) in tg.weights.row_mut(step.node).iter_mut().enumerate() {
                    *g += scale * (g0.mean[base + j] - g1.mean[base + j]);
                }
                tg.biases[step.node] += scale * (g0.mean[base + d] - g1.mean[base + d]);
            }
        }
    }
    Ok(FairnessGradient { gradient: grad, cold })
}

// ---------------------------------------------------------------------------
// Reservoir

/// Full history of the stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    history: Vec<Instance>,
}

impl Reservoir {
    pub fn push(&mut self, inst: Instance) {
        self.history.push(inst);
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.history
    }

    pub fn footprint_bytes(&self) -> usize {
        self.history.iter().map(|i| i.x.len() * 8 + 32).sum()
    }
}

impl FromIterator<Instance> for Reservoir {
    fn from_iter<T: IntoIterator<Item = Instance>>(iter: T) -> Self {
        Reservoir { history: iter.into_iter().collect() }
    }
}

/// Exact node constraints `F_ij` and `grad F_ij` over the stored history at
/// the forest's current parameters, indexed `[tree][node]`.
pub fn reservoir_node_constraints(
    reservoir: &Reservoir,
    forest: &ObliqueForest,
) -> Result<Vec<Vec<ConstraintEstimate>>> {
    let shape = forest.shape();
    let (m, d) = (shape.internal_nodes(), shape.dim);
    let mut out = Vec::with_capacity(shape.trees);
    for tree in forest.trees() {
        // per group: sum n, sum n(1-n) x, sum n(1-n)
        let mut sum_n = [vec![0.0; m], vec![0.0; m]];
        let mut sum_gw = [vec![0.0; m * d], vec![0.0; m * d]];
        let mut sum_gb = [vec![0.0; m], vec![0.0; m]];
        let mut counts = [0usize; 2];
        for inst in &reservoir.history {
            if inst.a > 1 {
                return Err(Error::Domain(format!("reservoir group {} outside [0, 2)", inst.a)));
            }
            let n = node_outputs(tree, &inst.x)?;
            let g = inst.a;
            counts[g] += 1;
            for (i, ni) in n.values.iter().enumerate() {
                let slope = ni * (1.0 - ni);
                sum_n[g][i] += ni;
                sum_gb[g][i] += slope;
                for (s, xi) in sum_gw[g][i * d..(i + 1) * d].iter_mut().zip(&inst.x) {
                    *s += slope * xi;
                }
            }
        }
        let nodes = (0..m)
            .map(|i| {
                if counts[0] == 0 || counts[1] == 0 {
                    return ConstraintEstimate { value: 0.0, grad_w: vec![0.0; d], grad_b: 0.0, cold: true };
                }
                let (c0, c1) = (counts[0] as f64, counts[1] as f64);
                ConstraintEstimate {
                    value: sum_n[0][i] / c0 - sum_n[1][i] / c1,
                    grad_w: (0..d).map(|j| sum_gw[0][i * d + j] / c0 - sum_gw[1][i * d + j] / c1).collect(),
                    grad_b: sum_gb[0][i] / c0 - sum_gb[1][i] / c1,
                    cold: false,
                }
            })
            .collect();
        out.push(nodes);
    }
    Ok(out)
}

/// Exact `lambda * sum_ij grad H_delta(F_ij)` recomputed from the history.
pub fn reservoir_fairness_gradient(
    reservoir: &Reservoir,
    forest: &ObliqueForest,
    params: HuberParams,
) -> Result<FairnessGradient> {
    let shape = forest.shape();
    let mut grad = ForestGradient::zeros(shape);
    if params.lambda == 0.0 {
        return Ok(FairnessGradient { gradient: grad, cold: false });
    }
    let constraints = reservoir_node_constraints(reservoir, forest)?;
    let mut cold = false;
    for (tg, nodes) in grad.trees.iter_mut().zip(&constraints) {
        for (i, c) in nodes.iter().enumerate() {
            if c.cold {
                cold = true;
                continue;
            }
            let scale = params.lambda * huber_grad_coeff(c.value, params.delta);
            for (g, v) in tg.weights.row_mut(i).iter_mut().zip(&c.grad_w) {
                *g = scale * v;
            }
            tg.biases[i] = scale * c.grad_b;
        }
    }
    Ok(FairnessGradient { gradient: grad, cold })
}

// ---------------------------------------------------------------------------
// MLP variant

/// Two-layer ReLU network `f(x) = relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("MLP hidden width must be positive".into()));
        }
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(MlpParams {
            w1: Array2::from_shape_simple_fn((dim, hidden), || rng.gen_range(-b1..=b1)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_simple_fn((hidden, classes), || rng.gen_range(-b2..=b2)),
            b2: Array1::zeros(classes),
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn classes(&self) -> usize {
        self.b2.len()
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        [&self.w1.as_slice(), &self.b1.as_slice(), &self.w2.as_slice(), &self.b2.as_slice()]
            .into_iter()
            .map(|b| b.expect("standard layout"))
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Pre-activations, hidden activations and outputs.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        shape_check("input dimension", self.dim(), x.len())?;
        let mut z = self.b1.to_vec();
        for (xi, row) in x.iter().zip(self.w1.rows()) {
            for (zj, w) in z.iter_mut().zip(row.iter()) {
                *zj += xi * w;
            }
        }
        let h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let mut f = self.b2.to_vec();
        for (hj, row) in h.iter().zip(self.w2.rows()) {
            for (fk, w) in f.iter_mut().zip(row.iter()) {
                *fk += hj * w;
            }
        }
        Ok((z, h, f))
    }

    /// Flat gradient of output `k` in block order `[W1, b1, W2, b2]`.
    pub fn output_jacobian_row(&self, x: &[f64], z: &[f64], h: &[f64], k: usize) -> Vec<f64> {
        let (d, m, c) = (self.dim(), self.hidden(), self.classes());
        let mut g = vec![0.0; self.param_count()];
        let gate: Vec<f64> = (0..m).map(|j| if z[j] > 0.0 { self.w2[[j, k]] } else { 0.0 }).collect();
        for i in 0..d {
            for j in 0..m {
                g[i * m + j] = x[i] * gate[j];
            }
        }
        g[d * m..d * m + m].copy_from_slice(&gate);
        let w2_base = d * m + m;
        for j in 0..m {
            g[w2_base + j * c + k] = h[j];
        }
        g[w2_base + m * c + k] = 1.0;
        g
    }

    /// Flat cross-entropy gradient in block order `[W1, b1, W2, b2]`.
    pub fn task_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let (z, h, f) = self.forward(x)?;
        let (d, m, c) = (self.dim(), self.hidden(), self.classes());
        let mut r = softmax(&f);
        r[y] -= 1.0;
        let mut g = vec![0.0; self.param_count()];
        let dz: Vec<f64> =
            (0..m).map(|j| if z[j] > 0.0 { (0..c).map(|k| self.w2[[j, k]] * r[k]).sum() } else { 0.0 }).collect();
        for i in 0..d {
            for j in 0..m {
                g[i * m + j] = x[i] * dz[j];
            }
        }
        g[d * m..d * m + m].copy_from_slice(&dz);
        let w2_base = d * m + m;
        for j in 0..m {
            for k in 0..c {
                g[w2_base + j * c + k] = h[j] * r[k];
            }
        }
        g[w2_base + m * c..].copy_from_slice(&r);
        Ok(g)
    }
}

/// Online MLP with the output-level constraint
/// `F_k = E[f_k(x) | a=0] - E[f_k(x) | a=1]` on every output coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLearner {
    config: LearnerConfig,
    params: MlpParams,
    adam: AdamState,
    /// Per group: `[f (c values), grad f_0 (P values), ..., grad f_{c-1}]`.
    stats: Vec<RunningMean>,
    metrics: MetricsTracker,
    step: u64,
}

impl MlpLearner {
    pub fn new(config: LearnerConfig, hidden: usize) -> Result<Self> {
        config.validate()?;
        require_binary(config.groups)?;
        if !matches!(config.notion, FairnessNotion::DemographicParity | FairnessNotion::None) {
            return Err(Error::Config("the MLP variant supports demographic parity only".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = MlpParams::random(config.shape.dim, hidden, config.shape.classes, &mut rng)?;
        let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
        let c = config.shape.classes;
        let len = c + c * params.param_count();
        Ok(MlpLearner {
            adam: AdamState::new(config.adam, &sizes)?,
            stats: vec![RunningMean::new(len); config.groups],
            metrics: MetricsTracker::new(config.groups),
            params,
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    /// Feeds the output statistics for `(x, a)` at the current parameters.
    pub fn observe(&mut self, x: &[f64], a: usize) -> Result<()> {
        if a >= self.stats.len() {
            return Err(Error::Domain(format!("group {a} outside [0, {})", self.stats.len())));
        }
        let (z, h, f) = self.params.forward(x)?;
        let mut buf = f.clone();
        for k in 0..f.len() {
            buf.extend(self.params.output_jacobian_row(x, &z, &h, k));
        }
        self.stats[a].push(&buf);
        Ok(())
    }

    /// `lambda * sum_k grad H_delta(F_k)` as a flat vector; zero while a
    /// group is unobserved.
    pub fn fairness_gradient(&self) -> Vec<f64> {
        let p = self.params.param_count();
        let mut g = vec![0.0; p];
        let HuberParams { delta, lambda } = self.config.huber;
        let (s0, s1) = (&self.stats[0], &self.stats[1]);
        if lambda == 0.0 || self.config.notion == FairnessNotion::None || s0.count == 0 || s1.count == 0 {
            return g;
        }
        let c = self.params.classes();
        for k in 0..c {
            let f = s0.mean[k] - s1.mean[k];
            let scale = lambda * huber_grad_coeff(f, delta);
            let base = c + k * p;
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += scale * (s0.mean[base + j] - s1.mean[base + j]);
            }
        }
        g
    }
}

fn split_blocks<'a>(flat: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut rest = flat;
    for s in sizes {
        let (head, tail) = rest.split_at(*s);
        out.push(head);
        rest = tail;
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl OnlineLearner for MlpLearner {
    fn step(&mut self, x: &[f64], y: usize, a: usize) -> Result<StepRecord> {
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
        let (_, _, f) = self.params.forward(x)?;
        let pred = argmax(&f);
        self.metrics.record(pred, y, a, soft_score(&f));
        self.observe(x, a)?;
        let task = self.params.task_gradient(x, y)?;
        let fair = self.fairness_gradient();
        let total: Vec<f64> = task.iter().zip(&fair).map(|(t, f)| t + f).collect();
        if total.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite MLP gradient".into()));
        }
        let sizes: Vec<usize> = self.params.blocks().iter().map(|b| b.len()).collect();
        self.adam.apply(self.params.blocks_mut(), split_blocks(&total, &sizes))?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            y,
            a,
            pred,
            running_accuracy: self.metrics.accuracy(),
            dp_hard: self.metrics.dp_hard(),
            dp_soft: self.metrics.dp_soft(),
            grad_norm_total: norm(&total),
            grad_norm_fair: norm(&fair),
        })
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.params.forward(x)?.2))
    }

    fn metrics(&self) -> &MetricsTracker {
        &self.metrics
    }

    fn checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    fn state_bytes(&self) -> usize {
        (self.params.param_count() * 3 + self.stats.iter().map(|s| s.mean.len()).sum::<usize>()) * 8
    }
}

// ---------------------------------------------------------------------------
// Majority post-processing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MajoritySource {
    /// A label known ahead of time.
    Fixed(usize),
    /// Most frequent label revealed so far (ties to the lowest label).
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorityConfig {
    /// Probability of keeping the model's prediction.
    pub p: f64,
    pub source: MajoritySource,
}

impl MajorityConfig {
    pub fn new(p: f64, source: MajoritySource) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("majority keep-probability must be in [0, 1], got {p}")));
        }
        Ok(MajorityConfig { p, source })
    }
}

impl Default for MajorityConfig {
    fn default() -> Self {
        MajorityConfig { p: 0.5, source: MajoritySource::Running }
    }
}

/// Keeps `prediction` with probability `p`, otherwise answers `majority`.
pub fn majority_postprocess<R: Rng + ?Sized>(
    prediction: usize,
    config: &MajorityConfig,
    majority: usize,
    rng: &mut R,
) -> usize {
    let u: f64 = rng.gen();
    if u < config.p {
        prediction
    } else {
        majority
    }
}

/// Node-constrained forest whose predictions are mixed with the majority label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityLearner {
    inner: Learner,
    config: MajorityConfig,
    label_counts: Vec<u64>,
    rng: ChaCha8Rng,
    metrics: MetricsTracker,
}

impl MajorityLearner {
    pub fn new(learner_config: LearnerConfig, config: MajorityConfig) -> Result<Self> {
        let classes = learner_config.shape.classes;
        if let MajoritySource::Fixed(label) = config.source {
            if label >= classes {
                return Err(Error::Config(format!("majority label {label} outside [0, {classes})")));
            }
        }
        let groups = learner_config.groups;
        let rng = ChaCha8Rng::seed_from_u64(learner_config.seed ^ 0x6d61_6a6f_7269_7479);
        Ok(MajorityLearner {
            inner: Learner::new(learner_config)?,
            config,
            label_counts: vec![0; classes],
            rng,
            metrics: MetricsTracker::new(groups),
        })
    }

    pub fn from_checkpoint(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn majority_label(&self) -> usize {
        match self.config.source {
            MajoritySource::Fixed(label) => label,
            MajoritySource::Running => {
                let mut best = 0;
                for (k, c) in self.label_counts.iter().enumerate() {
                    if *c > self.label_counts[best] {
                        best = k;
                    }
                }
                best
            }
        }
    }
}

impl OnlineLearner for MajorityLearner {
    fn step(&mut self, x: &[f64], y: usize, a: usize) -> Result<StepRecord> {
        let majority = self.majority_label();
        let soft_model = soft_score(&self.inner.forest().forward(x)?);
        let mut rec = self.inner.step(x, y, a)?;
        let pred = majority_postprocess(rec.pred, &self.config, majority, &mut self.rng);
        let soft = self.config.p * soft_model + (1.0 - self.config.p) * majority as f64;
        self.metrics.record(pred, y, a, soft);
        self.label_counts[y] += 1;
        rec.pred = pred;
        rec.running_accuracy = self.metrics.accuracy();
        rec.dp_hard = self.metrics.dp_hard();
        rec.dp_soft = self.metrics.dp_soft();
        Ok(rec)
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        self.inner.predict(x)
    }

    fn metrics(&self) -> &MetricsTracker {
        &self.metrics
    }

    fn checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    fn state_bytes(&self) -> usize {
        self.inner.state_bytes() + self.label_counts.len() * 8
    }
}

// ---------------------------------------------------------------------------
// Selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Node-level constraints from aggregate statistics.
    Node,
    Mlp,
    Leaf,
    Reservoir,
    Majority,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" | "aranyani" => Ok(Baseline::Node),
            "mlp" => Ok(Baseline::Mlp),
            "leaf" => Ok(Baseline::Leaf),
            "reservoir" => Ok(Baseline::Reservoir),
            "majority" => Ok(Baseline::Majority),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Baseline::Node => "node",
            Baseline::Mlp => "mlp",
            Baseline::Leaf => "leaf",
            Baseline::Reservoir => "reservoir",
            Baseline::Majority => "majority",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub hidden: usize,
    pub majority: MajorityConfig,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions { hidden: 64, majority: MajorityConfig::default() }
    }
}

pub type BoxedLearner = Box<dyn OnlineLearner + Send>;

pub fn build_learner(config: &LearnerConfig, baseline: Baseline, options: &BaselineOptions) -> Result<BoxedLearner> {
    let config = config.clone();
    Ok(match baseline {
        Baseline::Node => Box::new(Learner::with_site(config, ConstraintSite::Node)?),
        Baseline::Leaf => Box::new(Learner::with_site(config, ConstraintSite::Leaf)?),
        Baseline::Reservoir => Box::new(Learner::with_site(config, ConstraintSite::Reservoir)?),
        Baseline::Mlp => Box::new(MlpLearner::new(config, options.hidden)?),
        Baseline::Majority => Box::new(MajorityLearner::new(config, options.majority)?),
    })
}

pub fn resume_learner(baseline: Baseline, checkpoint: &str) -> Result<BoxedLearner> {
    Ok(match baseline {
        Baseline::Node | Baseline::Leaf | Baseline::Reservoir => Box::new(Learner::from_checkpoint(checkpoint)?),
        Baseline::Mlp => Box::new(MlpLearner::from_checkpoint(checkpoint)?),
        Baseline::Majority => Box::new(MajorityLearner::from_checkpoint(checkpoint)?),
    })
}
