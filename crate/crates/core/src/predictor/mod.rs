//! Streaming delivery-delay prediction.
//!
//! The classifier is an incremental Hoeffding tree over four numeric features
//! of a (courier situation, delivery task) pair. Leaves keep per-class
//! Gaussian statistics per feature and predict with Laplace-smoothed Naive
//! Bayes; internal nodes are binary threshold tests. A leaf is split once the
//! Hoeffding bound guarantees, at the configured confidence, that the best
//! candidate threshold beats the runner-up on information gain (or the two are
//! tied within the tie threshold).
//!
//! Around the tree sit the pieces needed to train it from delivery outcomes:
//! a per-task buffer of feature vectors sampled during the trip, and
//! prequential (test-then-train) metrics.

mod gaussian;
mod metrics;

pub use gaussian::GaussianEstimator;
pub use metrics::PrequentialMetrics;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::courier::DeliveryTask;
use crate::geo::{self, Location};
use crate::situation::SituationVector;
use crate::TaskId;

/// Number of features in a [`FeatureVector`].
pub const FEATURE_COUNT: usize = 4;

/// Variance floor applied to Gaussian likelihoods so that degenerate
/// estimators never produce infinite densities.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Features describing how a delivery is going for a particular courier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    /// Meters still to travel: to the pickup point (if the parcel is not in
    /// hand) plus from there to the task destination.
    pub remaining_distance: f64,
    /// Seconds until the deadline; negative once the deadline has passed.
    pub remaining_time: f64,
    pub avg_speed_5min: f64,
    pub max_speed_5min: f64,
}

impl FeatureVector {
    pub fn values(&self) -> [f64; FEATURE_COUNT] {
        [
            self.remaining_distance,
            self.remaining_time,
            self.avg_speed_5min,
            self.max_speed_5min,
        ]
    }
}

/// Delivery outcome label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Delay,
    NoDelay,
}

impl Label {
    pub const COUNT: usize = 2;

    fn index(self) -> usize {
        match self {
            Label::Delay => 0,
            Label::NoDelay => 1,
        }
    }
}

/// Builds the feature vector for a courier situation and a task.
///
/// `pickup` is where the parcel has to be fetched: the task origin while it
/// has not been picked up, the carrying courier's position otherwise (for the
/// carrier itself that first leg degenerates to zero).
pub fn build_features(
    sv: &SituationVector,
    task: &DeliveryTask,
    pickup: Location,
    now: f64,
) -> FeatureVector {
    FeatureVector {
        remaining_distance: geo::distance(sv.location, pickup)
            + geo::distance(pickup, task.destination),
        remaining_time: task.deadline - now,
        avg_speed_5min: sv.avg_speed_5min,
        max_speed_5min: sv.max_speed_5min,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("hoeffding bound needs at least one observation")]
    ZeroSamples,
    #[error("hoeffding bound range must be positive")]
    NonPositiveRange,
    #[error("hoeffding bound confidence must lie in (0, 1]")]
    ConfidenceOutOfRange,
}

/// Confidence radius `eps = sqrt(R^2 ln(1/delta) / (2n))` on an n-sample mean
/// of a statistic with range `R`.
pub fn hoeffding_bound(range: f64, confidence: f64, n: u64) -> Result<f64, BoundError> {
    if n == 0 {
        return Err(BoundError::ZeroSamples);
    }
    if !(range > 0.0) {
        return Err(BoundError::NonPositiveRange);
    }
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(BoundError::ConfidenceOutOfRange);
    }
    Ok(bound_for_weight(range, confidence, n as f64))
}

fn bound_for_weight(range: f64, confidence: f64, weight: f64) -> f64 {
    (range * range * (1.0 / confidence).ln() / (2.0 * weight)).sqrt()
}

/// Laplace-smoothed (add-one) class priors from raw class counts.
pub fn laplace_priors(class_counts: [f64; Label::COUNT]) -> [f64; Label::COUNT] {
    let total: f64 = class_counts.iter().sum();
    [
        (class_counts[0] + 1.0) / (total + 2.0),
        (class_counts[1] + 1.0) / (total + 2.0),
    ]
}

/// Tree growth parameters, mirroring common stream-library defaults.
#[derive(Clone, Copy, Debug)]
pub struct HoeffdingTreeConfig {
    /// Examples a leaf accumulates between split attempts.
    pub grace_period: u64,
    /// Split confidence delta.
    pub split_confidence: f64,
    /// Tie threshold tau: split anyway once the bound shrinks below this.
    pub tie_threshold: f64,
    /// Candidate thresholds evaluated per feature, evenly spaced between the
    /// observed minimum and maximum.
    pub split_candidates: usize,
}

impl Default for HoeffdingTreeConfig {
    fn default() -> Self {
        Self {
            grace_period: 200,
            split_confidence: 1e-7,
            tie_threshold: 0.05,
            split_candidates: 10,
        }
    }
}

impl HoeffdingTreeConfig {
    /// Configuration with splitting disabled; the tree stays a single
    /// Naive-Bayes leaf.
    pub fn splits_disabled() -> Self {
        Self {
            grace_period: u64::MAX,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct LeafStats {
    class_counts: [f64; Label::COUNT],
    estimators: [[GaussianEstimator; FEATURE_COUNT]; Label::COUNT],
    min_seen: [f64; FEATURE_COUNT],
    max_seen: [f64; FEATURE_COUNT],
    examples_since_attempt: u64,
}

impl LeafStats {
    fn new(class_counts: [f64; Label::COUNT]) -> Self {
        Self {
            class_counts,
            estimators: Default::default(),
            min_seen: [f64::INFINITY; FEATURE_COUNT],
            max_seen: [f64::NEG_INFINITY; FEATURE_COUNT],
            examples_since_attempt: 0,
        }
    }

    fn observe(&mut self, fv: &FeatureVector, label: Label) {
        let values = fv.values();
        let class = label.index();
        self.class_counts[class] += 1.0;
        for (feature, value) in values.iter().enumerate() {
            self.estimators[class][feature].add(*value);
            self.min_seen[feature] = self.min_seen[feature].min(*value);
            self.max_seen[feature] = self.max_seen[feature].max(*value);
        }
        self.examples_since_attempt += 1;
    }

    fn log_posteriors(&self, fv: &FeatureVector) -> [f64; Label::COUNT] {
        let values = fv.values();
        let priors = laplace_priors(self.class_counts);
        let mut log_weights = [priors[0].ln(), priors[1].ln()];
        for (feature, value) in values.iter().enumerate() {
            // A feature weighs in only when every class can score it;
            // otherwise densities would be compared against bare priors on
            // incompatible scales.
            let usable = (0..Label::COUNT).all(|c| self.estimators[c][feature].count() >= 2);
            if !usable {
                continue;
            }
            for (class, lw) in log_weights.iter_mut().enumerate() {
                let est = &self.estimators[class][feature];
                let var = est.variance().max(VARIANCE_FLOOR);
                let diff = value - est.mean();
                *lw += -0.5 * ((std::f64::consts::TAU * var).ln() + diff * diff / var);
            }
        }
        log_weights
    }

    /// Best split over all feature/threshold candidates, if the Hoeffding
    /// test sanctions one.
    fn best_split(&self, config: &HoeffdingTreeConfig) -> Option<SplitCandidate> {
        let active_classes = self.class_counts.iter().filter(|&&c| c > 0.0).count();
        if active_classes < 2 {
            return None;
        }

        let mut suggestions: Vec<SplitCandidate> = Vec::new();
        for feature in 0..FEATURE_COUNT {
            let (min, max) = (self.min_seen[feature], self.max_seen[feature]);
            if !(max > min) {
                continue;
            }
            let mut best: Option<SplitCandidate> = None;
            for k in 1..=config.split_candidates {
                let threshold =
                    min + (max - min) * k as f64 / (config.split_candidates as f64 + 1.0);
                let mut left = [0.0; Label::COUNT];
                let mut right = [0.0; Label::COUNT];
                for class in 0..Label::COUNT {
                    let est = &self.estimators[class][feature];
                    let below = est.mass_at_or_below(threshold).clamp(0.0, est.count() as f64);
                    left[class] = below;
                    right[class] = est.count() as f64 - below;
                }
                let gain = info_gain(left, right);
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(SplitCandidate {
                        feature,
                        threshold,
                        gain,
                        left,
                        right,
                    });
                }
            }
            if let Some(b) = best {
                suggestions.push(b);
            }
        }

        suggestions.sort_by(|a, b| {
            b.gain
                .partial_cmp(&a.gain)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.feature.cmp(&b.feature))
        });
        let best = suggestions.first()?;
        if !(best.gain > 0.0) {
            return None;
        }
        // The no-split option has zero gain and acts as the runner-up when
        // only one feature yields a usable threshold.
        let second_gain = suggestions.get(1).map_or(0.0, |s| s.gain).max(0.0);

        let weight: f64 = self.class_counts.iter().sum();
        let bound = bound_for_weight(1.0, config.split_confidence, weight);
        if best.gain - second_gain > bound || bound < config.tie_threshold {
            Some(best.clone())
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
    left: [f64; Label::COUNT],
    right: [f64; Label::COUNT],
}

/// Binary entropy of a class-count distribution, in bits.
fn entropy(dist: [f64; Label::COUNT]) -> f64 {
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in &dist {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.log2();
        }
    }
    h
}

fn info_gain(left: [f64; Label::COUNT], right: [f64; Label::COUNT]) -> f64 {
    let wl: f64 = left.iter().sum();
    let wr: f64 = right.iter().sum();
    let total = wl + wr;
    if wl <= 0.0 || wr <= 0.0 {
        return 0.0;
    }
    let parent = [left[0] + right[0], left[1] + right[1]];
    entropy(parent) - (wl / total) * entropy(left) - (wr / total) * entropy(right)
}

#[derive(Clone, Debug)]
enum TreeNode {
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf(LeafStats),
}

impl TreeNode {
    fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf(_) => 1,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf(_) => 1,
            TreeNode::Internal { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }
}

/// Structural summary for the model-statistics report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeStats {
    pub nodes: usize,
    pub leaves: usize,
    pub depth: usize,
    pub examples_seen: u64,
}

impl fmt::Display for TreeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes: {}", self.nodes)?;
        writeln!(f, "leaves: {}", self.leaves)?;
        writeln!(f, "depth: {}", self.depth)?;
        write!(f, "examples_seen: {}", self.examples_seen)
    }
}

/// Incremental Hoeffding-tree classifier with Naive-Bayes leaves.
#[derive(Clone, Debug)]
pub struct HoeffdingTree {
    root: TreeNode,
    config: HoeffdingTreeConfig,
    node_count: usize,
    examples_seen: u64,
}

impl Default for HoeffdingTree {
    fn default() -> Self {
        Self::new(HoeffdingTreeConfig::default())
    }
}

impl HoeffdingTree {
    pub fn new(config: HoeffdingTreeConfig) -> Self {
        Self {
            root: TreeNode::Leaf(LeafStats::new([0.0; Label::COUNT])),
            config,
            node_count: 1,
            examples_seen: 0,
        }
    }

    pub fn config(&self) -> &HoeffdingTreeConfig {
        &self.config
    }

    /// Total node count (internal nodes plus leaves). Never decreases.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            nodes: self.node_count,
            leaves: self.root.leaf_count(),
            depth: self.root.depth(),
            examples_seen: self.examples_seen,
        }
    }

    fn leaf_for(&self, fv: &FeatureVector) -> &LeafStats {
        let values = fv.values();
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf(stats) => return stats,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if values[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    /// Normalized posterior `[P(delay), P(no_delay)]` at the routed leaf.
    pub fn predict_posterior(&self, fv: &FeatureVector) -> [f64; Label::COUNT] {
        let log_weights = self.leaf_for(fv).log_posteriors(fv);
        let sigma = 1.0 / (1.0 + (log_weights[0] - log_weights[1]).exp());
        [1.0 - sigma, sigma]
    }

    /// Probability that the delivery finishes on time.
    pub fn predict_on_time(&self, fv: &FeatureVector) -> f64 {
        self.predict_posterior(fv)[Label::NoDelay.index()]
    }

    /// Label with the larger posterior; ties go to `NoDelay`.
    pub fn predict_label(&self, fv: &FeatureVector) -> Label {
        if self.predict_on_time(fv) >= 0.5 {
            Label::NoDelay
        } else {
            Label::Delay
        }
    }

    /// Absorbs one labeled example, splitting the routed leaf when the
    /// Hoeffding test sanctions it.
    pub fn learn_one(&mut self, fv: &FeatureVector, label: Label) {
        self.examples_seen += 1;
        let config = self.config;
        let values = fv.values();

        let mut node = &mut self.root;
        loop {
            match node {
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if values[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
                TreeNode::Leaf(_) => break,
            }
        }

        let TreeNode::Leaf(stats) = node else {
            unreachable!()
        };
        stats.observe(fv, label);

        if config.grace_period != u64::MAX && stats.examples_since_attempt >= config.grace_period {
            stats.examples_since_attempt = 0;
            if let Some(split) = stats.best_split(&config) {
                *node = TreeNode::Internal {
                    feature: split.feature,
                    threshold: split.threshold,
                    left: Box::new(TreeNode::Leaf(LeafStats::new(split.left))),
                    right: Box::new(TreeNode::Leaf(LeafStats::new(split.right))),
                };
                self.node_count += 2;
            }
        }
    }

    /// Root split test, if the root has been split. Exposed for inspection in
    /// tests and reports.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match &self.root {
            TreeNode::Internal {
                feature, threshold, ..
            } => Some((*feature, *threshold)),
            TreeNode::Leaf(_) => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("no feature vectors recorded for task {0}")]
pub struct EmptyBufferError(pub TaskId);

/// Feature vectors collected per task while its delivery is running.
#[derive(Clone, Debug, Default)]
pub struct TrainingBuffer {
    samples: BTreeMap<TaskId, Vec<FeatureVector>>,
}

impl TrainingBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_sample(&mut self, task: TaskId, fv: FeatureVector) {
        self.samples.entry(task).or_default().push(fv);
    }

    pub fn samples_for(&self, task: TaskId) -> &[FeatureVector] {
        self.samples.get(&task).map_or(&[], Vec::as_slice)
    }

    /// Drops all vectors recorded for `task`, returning how many there were.
    pub fn clear_task(&mut self, task: TaskId) -> usize {
        self.samples.remove(&task).map_or(0, |v| v.len())
    }

    pub fn task_count(&self) -> usize {
        self.samples.len()
    }

    fn take(&mut self, task: TaskId) -> Option<Vec<FeatureVector>> {
        self.samples.remove(&task)
    }
}

/// Trains the tree with one uniformly chosen vector from the task's buffer
/// and clears the buffer entry.
///
/// Returns the chosen vector; an empty buffer leaves the tree untouched.
pub fn train_on_outcome<R: Rng + ?Sized>(
    tree: &mut HoeffdingTree,
    buffer: &mut TrainingBuffer,
    task: TaskId,
    outcome: Label,
    rng: &mut R,
) -> Result<FeatureVector, EmptyBufferError> {
    let Some(vectors) = buffer.take(task) else {
        return Err(EmptyBufferError(task));
    };
    debug_assert!(!vectors.is_empty());
    let chosen = vectors[rng.random_range(0..vectors.len())];
    tree.learn_one(&chosen, outcome);
    Ok(chosen)
}
