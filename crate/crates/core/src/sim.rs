//! Desk-scale incremental-learning harness.
//!
//! A toy linear detector head is trained on synthetic class-conditional
//! scenes through base -> novel steps under three protocols: `joint`
//! (upper bound, one training run on all classes), `finetune` (sequential
//! steps, detector loss only; exhibits catastrophic forgetting) and `r2d`
//! (sequential steps with response distillation against the previous
//! step's frozen detector).
//!
//! Scenes place boxes of the active classes on a single-level grid; node
//! features inside a box are that class's prototype vector plus noise,
//! and pure noise elsewhere. A `homogeneity` knob blends a shared
//! direction into every prototype so that different classes excite each
//! other's heads, which is what makes naive fine-tuning collapse and
//! gives the teacher something to say about new-step images.
//!
//! Everything is deterministic given the world and protocol seeds.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distill::{distill_loss_and_grads, DistillGradients, DistillMode, LossWeights};
use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::region::RegionConfig;
use crate::response::{
    classification_quality, decode_box, ClassificationResponse, DecodedBox, NodeGrid,
    RegressionResponse, ResponseBundle, Role,
};

/// Confidence floor for decoding detections during evaluation.
const EVAL_SCORE_THRESHOLD: f64 = 0.05;
/// Maximum IoU tolerated between placed objects.
const PLACEMENT_MAX_IOU: f64 = 0.2;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Geometry and statistics of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-node feature noise.
    pub noise_scale: f64,
    /// Fraction of a shared direction blended into every class prototype.
    pub homogeneity: f64,
    /// Minimum pairwise distance between class prototypes.
    pub separation_margin: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub stride: f64,
    pub objects_per_scene: usize,
    /// Inclusive box side-length range in pixels.
    pub box_size: (f64, f64),
    pub bins: usize,
    pub bin_width: f64,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            feature_dim: 16,
            noise_scale: 0.1,
            homogeneity: 0.6,
            separation_margin: 0.3,
            grid_width: 16,
            grid_height: 16,
            stride: 8.0,
            objects_per_scene: 3,
            box_size: (22.0, 36.0),
            bins: 8,
            bin_width: 1.0,
            eval_scenes: 16,
            seed: 18,
        }
    }
}

/// A realized world: config plus the generated class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub cfg: WorldConfig,
    class_means: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= norm;
    }
}

impl SyntheticWorld {
    /// Generates unit-norm class prototypes with the configured shared
    /// component, rejection-sampling until every pair is at least
    /// `separation_margin` apart.
    pub fn generate(cfg: WorldConfig) -> Result<Self> {
        if cfg.num_classes == 0 || cfg.feature_dim == 0 {
            return Err(Error::InvalidWorld("need at least one class and one dimension".into()));
        }
        if !(0.0..1.0).contains(&cfg.homogeneity) {
            return Err(Error::InvalidWorld("homogeneity must be in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let gauss_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> =
                (0..cfg.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
            normalize(&mut v);
            v
        };
        let shared = gauss_vec(&mut rng);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
        for c in 0..cfg.num_classes {
            let mut placed = false;
            for _ in 0..1000 {
                let own = gauss_vec(&mut rng);
                let mut mean: Vec<f64> = shared
                    .iter()
                    .zip(&own)
                    .map(|(s, o)| cfg.homogeneity * s + (1.0 - cfg.homogeneity) * o)
                    .collect();
                normalize(&mut mean);
                let ok = means.iter().all(|m| {
                    let d2: f64 =
                        m.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt() >= cfg.separation_margin
                });
                if ok {
                    means.push(mean);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidWorld(format!(
                    "could not place class {c} with margin {}",
                    cfg.separation_margin
                )));
            }
        }
        Ok(Self { cfg, class_means: means })
    }

    /// The frozen default world at `seed`.
    pub fn default_world(seed: u64) -> Self {
        Self::generate(WorldConfig { seed, ..WorldConfig::default() })
            .expect("default world config is generatable")
    }

    pub fn grid(&self) -> NodeGrid {
        NodeGrid::single(self.cfg.grid_width, self.cfg.grid_height, self.cfg.stride)
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.class_means[class]
    }
}

/// One placed object: world class id plus its box.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bx: DecodedBox,
}

/// Supervision for one positive node, in detector column space when
/// produced by [`column_targets`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeTarget {
    pub class: usize,
    pub edge_bins: [usize; 4],
}

/// A generated scene: per-node features, the placed objects, and
/// per-node supervision (class in world-id space).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub features: Vec<Vec<f64>>,
    pub objects: Vec<GroundTruth>,
    pub node_targets: Vec<Option<NodeTarget>>,
}

/// Places objects of `active_classes` and renders node features:
/// prototype plus noise inside boxes, pure noise elsewhere. Ground truth
/// is recorded per node as the class and the binned distances from the
/// node center to the owning box's edges. Only the active classes are
/// labeled, mirroring the incremental annotation rule.
pub fn generate_scene(
    world: &SyntheticWorld,
    active_classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    if active_classes.is_empty() {
        return Err(Error::InvalidProtocol("no active classes".into()));
    }
    let cfg = &world.cfg;
    let img_w = cfg.grid_width as f64 * cfg.stride;
    let img_h = cfg.grid_height as f64 * cfg.stride;
    if cfg.box_size.1 > img_w || cfg.box_size.1 > img_h {
        return Err(Error::SceneOverconstrained(format!(
            "box size {} exceeds image {}x{}",
            cfg.box_size.1, img_w, img_h
        )));
    }

    let mut objects: Vec<GroundTruth> = Vec::with_capacity(cfg.objects_per_scene);
    for _ in 0..cfg.objects_per_scene {
        let class = active_classes[rng.random_range(0..active_classes.len())];
        let w = rng.random_range(cfg.box_size.0..=cfg.box_size.1);
        let h = rng.random_range(cfg.box_size.0..=cfg.box_size.1);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x1 = rng.random_range(0.0..=(img_w - w));
            let y1 = rng.random_range(0.0..=(img_h - h));
            let bx = DecodedBox { x1, y1, x2: x1 + w, y2: y1 + h, score: 1.0 };
            if objects.iter().all(|o| o.bx.iou(&bx) <= PLACEMENT_MAX_IOU) {
                objects.push(GroundTruth { class, bx });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SceneOverconstrained(format!(
                "could not place {} non-overlapping objects",
                cfg.objects_per_scene
            )));
        }
    }

    let grid = world.grid();
    let nodes = grid.node_count();
    let mut features = Vec::with_capacity(nodes);
    let mut node_targets = Vec::with_capacity(nodes);
    let unit = cfg.bin_width * cfg.stride;
    for i in 0..nodes {
        let (cx, cy, _) = grid.node_center(i)?;
        let owner = objects
            .iter()
            .find(|o| cx >= o.bx.x1 && cx < o.bx.x2 && cy >= o.bx.y1 && cy < o.bx.y2);
        let mut feat: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                cfg.noise_scale * g
            })
            .collect();
        match owner {
            Some(o) => {
                for (f, m) in feat.iter_mut().zip(world.class_mean(o.class)) {
                    *f += m;
                }
                let to_bin = |d: f64| -> usize {
                    ((d / unit).round() as i64).clamp(0, cfg.bins as i64 - 1) as usize
                };
                node_targets.push(Some(NodeTarget {
                    class: o.class,
                    edge_bins: [
                        to_bin(cy - o.bx.y1),
                        to_bin(o.bx.y2 - cy),
                        to_bin(cx - o.bx.x1),
                        to_bin(o.bx.x2 - cx),
                    ],
                }));
            }
            None => node_targets.push(None),
        }
        features.push(feat);
    }
    Ok(Scene { features, objects, node_targets })
}

/// Re-labels scene targets from world class ids to detector columns.
/// Targets for classes the detector does not know are dropped.
pub fn column_targets(
    scene: &Scene,
    class_to_col: &HashMap<usize, usize>,
) -> Vec<Option<NodeTarget>> {
    scene
        .node_targets
        .iter()
        .map(|t| {
            t.and_then(|t| {
                class_to_col.get(&t.class).map(|&col| NodeTarget { class: col, ..t })
            })
        })
        .collect()
}

/// Linear per-node detector: a classification row per known class and a
/// shared regression head of `4 * bins` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub feature_dim: usize,
    pub bins: usize,
    pub bin_width: f64,
    /// World class id per classification column, in introduction order.
    pub classes: Vec<usize>,
    pub cls_w: Vec<Vec<f64>>,
    pub cls_b: Vec<f64>,
    pub reg_w: Vec<Vec<f64>>,
    pub reg_b: Vec<f64>,
}

impl ToyDetector {
    /// A detector with no classes yet; regression rows start at zero.
    pub fn new(feature_dim: usize, bins: usize, bin_width: f64) -> Self {
        Self {
            feature_dim,
            bins,
            bin_width,
            classes: Vec::new(),
            cls_w: Vec::new(),
            cls_b: Vec::new(),
            reg_w: vec![vec![0.0; feature_dim]; 4 * bins],
            reg_b: vec![0.0; 4 * bins],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Appends zero-initialized rows for newly introduced classes so
    /// their initial probabilities are uniform. Existing rows are
    /// untouched.
    pub fn add_classes(&mut self, class_ids: &[usize]) {
        for &id in class_ids {
            self.classes.push(id);
            self.cls_w.push(vec![0.0; self.feature_dim]);
            self.cls_b.push(0.0);
        }
    }

    /// Fills all parameters with `scale`-sized noise (for "untrained
    /// random detector" baselines).
    pub fn randomize(&mut self, scale: f64, rng: &mut ChaCha8Rng) {
        let mut fill = |rows: &mut Vec<Vec<f64>>, b: &mut Vec<f64>| {
            for row in rows.iter_mut() {
                for w in row.iter_mut() {
                    let g: f64 = StandardNormal.sample(rng);
                    *w = scale * g;
                }
            }
            for w in b.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *w = scale * g;
            }
        };
        fill(&mut self.cls_w, &mut self.cls_b);
        fill(&mut self.reg_w, &mut self.reg_b);
    }

    /// Forward pass over node features, exposing the first `n_cols`
    /// classification columns.
    pub fn forward_classes(
        &self,
        features: &[Vec<f64>],
        grid: &NodeGrid,
        n_cols: usize,
        role: Role,
    ) -> ResponseBundle {
        debug_assert!(n_cols >= 1 && n_cols <= self.num_classes());
        let dot = |w: &[f64], x: &[f64]| -> f64 { w.iter().zip(x).map(|(a, b)| a * b).sum() };
        let cls_nodes: Vec<Vec<f64>> = features
            .iter()
            .map(|x| (0..n_cols).map(|c| dot(&self.cls_w[c], x) + self.cls_b[c]).collect())
            .collect();
        let reg_nodes: Vec<[Vec<f64>; 4]> = features
            .iter()
            .map(|x| {
                std::array::from_fn(|e| {
                    (0..self.bins)
                        .map(|k| {
                            let row = e * self.bins + k;
                            dot(&self.reg_w[row], x) + self.reg_b[row]
                        })
                        .collect()
                })
            })
            .collect();
        ResponseBundle {
            grid: grid.clone(),
            cls: ClassificationResponse { nodes: cls_nodes },
            reg: RegressionResponse { bins: self.bins, bin_width: self.bin_width, nodes: reg_nodes },
            role,
        }
    }

    pub fn forward(&self, features: &[Vec<f64>], grid: &NodeGrid, role: Role) -> ResponseBundle {
        self.forward_classes(features, grid, self.num_classes(), role)
    }
}

/// Gradients with respect to every detector parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGradients {
    pub cls_w: Vec<Vec<f64>>,
    pub cls_b: Vec<f64>,
    pub reg_w: Vec<Vec<f64>>,
    pub reg_b: Vec<f64>,
}

impl DetectorGradients {
    pub fn zeros(det: &ToyDetector) -> Self {
        Self {
            cls_w: vec![vec![0.0; det.feature_dim]; det.num_classes()],
            cls_b: vec![0.0; det.num_classes()],
            reg_w: vec![vec![0.0; det.feature_dim]; 4 * det.bins],
            reg_b: vec![0.0; 4 * det.bins],
        }
    }

    pub fn add(&mut self, other: &DetectorGradients) {
        let add_rows = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
        };
        add_rows(&mut self.cls_w, &other.cls_w);
        add_rows(&mut self.reg_w, &other.reg_w);
        for (x, y) in self.cls_b.iter_mut().zip(&other.cls_b) {
            *x += y;
        }
        for (x, y) in self.reg_b.iter_mut().zip(&other.reg_b) {
            *x += y;
        }
    }

    /// Chains per-logit distillation gradients through the linear head:
    /// `dL/dW_row += g * x`, `dL/db_row += g`. Only the columns present
    /// in `dg` (the teacher-known classes) are touched.
    pub fn add_logit_grads(&mut self, dg: &DistillGradients, features: &[Vec<f64>], bins: usize) {
        for (x, (gc, gr)) in features.iter().zip(dg.cls.iter().zip(&dg.reg)) {
            for (c, &g) in gc.iter().enumerate() {
                if g != 0.0 {
                    for (w, xd) in self.cls_w[c].iter_mut().zip(x) {
                        *w += g * xd;
                    }
                    self.cls_b[c] += g;
                }
            }
            for (e, edge) in gr.iter().enumerate() {
                for (k, &g) in edge.iter().enumerate() {
                    if g != 0.0 {
                        let row = e * bins + k;
                        for (w, xd) in self.reg_w[row].iter_mut().zip(x) {
                            *w += g * xd;
                        }
                        self.reg_b[row] += g;
                    }
                }
            }
        }
    }
}

impl ToyDetector {
    /// Plain gradient-descent update: `theta -= lr * grad`.
    pub fn apply_gradients(&mut self, grads: &DetectorGradients, lr: f64) {
        for (row, grow) in self.cls_w.iter_mut().zip(&grads.cls_w) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * g;
            }
        }
        for (b, g) in self.cls_b.iter_mut().zip(&grads.cls_b) {
            *b -= lr * g;
        }
        for (row, grow) in self.reg_w.iter_mut().zip(&grads.reg_w) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * g;
            }
        }
        for (b, g) in self.reg_b.iter_mut().zip(&grads.reg_b) {
            *b -= lr * g;
        }
    }
}

/// Detection loss for one scene with analytic parameter gradients.
///
/// Classification: per-node binary cross-entropy on every known class
/// logit (target 1 inside a box of that class, else 0), summed over
/// classes and averaged over nodes. Localization: cross-entropy of each
/// edge distribution against its ground-truth bin, averaged over the
/// positive nodes and the four edges. `targets` must be in detector
/// column space.
pub fn detector_loss(
    det: &ToyDetector,
    features: &[Vec<f64>],
    targets: &[Option<NodeTarget>],
) -> Result<(f64, DetectorGradients)> {
    if features.len() != targets.len() {
        return Err(Error::LengthMismatch { left: features.len(), right: targets.len() });
    }
    if det.num_classes() == 0 {
        return Err(Error::NoClasses);
    }
    let n_nodes = features.len();
    let n_pos = targets.iter().filter(|t| t.is_some()).count();
    let mut grads = DetectorGradients::zeros(det);
    let mut cls_loss = 0.0;
    let mut reg_loss = 0.0;
    let cls_norm = 1.0 / n_nodes as f64;
    let reg_norm = if n_pos > 0 { 1.0 / (4.0 * n_pos as f64) } else { 0.0 };
    let dot = |w: &[f64], x: &[f64]| -> f64 { w.iter().zip(x).map(|(a, b)| a * b).sum() };

    for (x, target) in features.iter().zip(targets) {
        for c in 0..det.num_classes() {
            let z = dot(&det.cls_w[c], x) + det.cls_b[c];
            let y = match target {
                Some(t) if t.class == c => 1.0,
                _ => 0.0,
            };
            // stable BCE with logits
            cls_loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) * cls_norm;
            let g = (sigmoid(z) - y) * cls_norm;
            for (w, xd) in grads.cls_w[c].iter_mut().zip(x) {
                *w += g * xd;
            }
            grads.cls_b[c] += g;
        }
        if let Some(t) = target {
            for (e, &gt_bin) in t.edge_bins.iter().enumerate() {
                let logits: Vec<f64> = (0..det.bins)
                    .map(|k| dot(&det.reg_w[e * det.bins + k], x) + det.reg_b[e * det.bins + k])
                    .collect();
                let p = crate::numeric::softmax(&logits, 1.0)?;
                reg_loss += -p.values()[gt_bin].max(f64::MIN_POSITIVE).ln() * reg_norm;
                for (k, &pk) in p.values().iter().enumerate() {
                    let g = (pk - if k == gt_bin { 1.0 } else { 0.0 }) * reg_norm;
                    let row = e * det.bins + k;
                    for (w, xd) in grads.reg_w[row].iter_mut().zip(x) {
                        *w += g * xd;
                    }
                    grads.reg_b[row] += g;
                }
            }
        }
    }
    Ok((cls_loss + reg_loss, grads))
}

/// Which training recipe to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Joint,
    Finetune,
    R2d,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Joint => write!(f, "joint"),
            Protocol::Finetune => write!(f, "finetune"),
            Protocol::R2d => write!(f, "r2d"),
        }
    }
}

/// A full training recipe: protocol, class steps and optimization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Disjoint world class-id sets, one per incremental step.
    pub steps: Vec<Vec<usize>>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scenes_per_epoch: usize,
    pub weights: LossWeights,
    pub region: RegionConfig,
    pub distill_mode: DistillMode,
    pub seed: u64,
}

impl ProtocolConfig {
    /// The frozen default recipe on the default world's class layout:
    /// a 6+6 two-step split.
    pub fn default_config(protocol: Protocol, seed: u64) -> Self {
        Self {
            protocol,
            steps: vec![(0..6).collect(), (6..12).collect()],
            epochs: 150,
            learning_rate: 4.0,
            batch_size: 4,
            scenes_per_epoch: 32,
            weights: LossWeights::default(),
            region: RegionConfig::default(),
            distill_mode: DistillMode::Refined,
            seed,
        }
    }

    fn validate(&self, world: &SyntheticWorld) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidProtocol("no steps".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for step in &self.steps {
            if step.is_empty() {
                return Err(Error::InvalidProtocol("empty step".into()));
            }
            for &c in step {
                if c >= world.cfg.num_classes {
                    return Err(Error::InvalidProtocol(format!(
                        "class {c} outside world ({} classes)",
                        world.cfg.num_classes
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::InvalidProtocol(format!("class {c} in two steps")));
                }
            }
        }
        if self.batch_size == 0 || self.scenes_per_epoch < self.batch_size {
            return Err(Error::InvalidProtocol(
                "need batch_size >= 1 and scenes_per_epoch >= batch_size".into(),
            ));
        }
        Ok(())
    }
}

/// One evaluation record. `forgetting` is the score drop relative to the
/// group's score at the end of the step that introduced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub protocol: Protocol,
    pub step: usize,
    pub group: usize,
    pub score: f64,
    pub forgetting: f64,
}

/// All metric rows of one (or several) protocol runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimMetrics {
    pub rows: Vec<MetricRow>,
}

impl SimMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("protocol,step,group,score,forgetting\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.protocol, r.step, r.group, r.score, r.forgetting
            ));
        }
        out
    }

    pub fn score(&self, protocol: Protocol, step: usize, group: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.protocol == protocol && r.step == step && r.group == group)
            .map(|r| r.score)
    }

    pub fn extend(&mut self, other: SimMetrics) {
        self.rows.extend(other.rows);
    }
}

fn train_rng(world: &SyntheticWorld, cfg: &ProtocolConfig, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(world.cfg.seed ^ cfg.seed.rotate_left(17));
    rng.set_stream(0x5EED_0000 + step as u64);
    rng
}

fn eval_rng(world: &SyntheticWorld, class_group: &[usize]) -> ChaCha8Rng {
    let mut ids: Vec<usize> = class_group.to_vec();
    ids.sort_unstable();
    // fold the sorted ids into a stream key (FNV-1a)
    let key = ids.iter().fold(0xcbf29ce484222325u64, |acc, &id| {
        (acc ^ id as u64).wrapping_mul(0x100000001b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(world.cfg.seed);
    rng.set_stream(0xE7A1_0000 ^ key);
    rng
}

/// Hit-rate proxy score over a fixed seeded evaluation set.
///
/// Boxes are decoded at nodes whose classification quality exceeds 0.05,
/// greedy-matched to ground truth at IoU >= 0.5 in score order, and the
/// score is the fraction of ground-truth objects that were matched by a
/// correctly classified detection.
pub fn evaluate(det: &ToyDetector, world: &SyntheticWorld, class_group: &[usize]) -> Result<f64> {
    if world.cfg.eval_scenes == 0 {
        return Err(Error::NoEvalScenes);
    }
    let grid = world.grid();
    let mut rng = eval_rng(world, class_group);
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..world.cfg.eval_scenes {
        let scene = generate_scene(world, class_group, &mut rng)?;
        let bundle = det.forward(&scene.features, &grid, Role::Student);
        let q = classification_quality(&bundle.cls)?;
        let mut dets: Vec<(usize, DecodedBox, usize)> = Vec::new();
        for (i, &qi) in q.values.iter().enumerate() {
            if qi > EVAL_SCORE_THRESHOLD {
                let bx = decode_box(i, &grid, &bundle.reg, qi)?;
                let col = crate::distill::argmax(&bundle.cls.nodes[i]);
                dets.push((i, bx, det.classes[col]));
            }
        }
        dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        let mut claimed: Vec<Option<usize>> = vec![None; scene.objects.len()];
        for (_, bx, pred_class) in &dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in scene.objects.iter().enumerate() {
                if claimed[gi].is_some() {
                    continue;
                }
                let iou = bx.iou(&gt.bx);
                if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                claimed[gi] = Some(*pred_class);
            }
        }
        for (gi, gt) in scene.objects.iter().enumerate() {
            total += 1;
            if claimed[gi] == Some(gt.class) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / total as f64)
}

fn train_step(
    det: &mut ToyDetector,
    teacher: Option<&ToyDetector>,
    classes: &[usize],
    step: usize,
    cfg: &ProtocolConfig,
    world: &SyntheticWorld,
) -> Result<()> {
    let grid = world.grid();
    let col_of: HashMap<usize, usize> =
        det.classes.iter().enumerate().map(|(col, &id)| (id, col)).collect();
    let mut rng = train_rng(world, cfg, step);
    let batches = cfg.scenes_per_epoch / cfg.batch_size;
    for epoch in 0..cfg.epochs {
        for _ in 0..batches {
            let mut acc = DetectorGradients::zeros(det);
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let scene = generate_scene(world, classes, &mut rng)?;
                let targets = column_targets(&scene, &col_of);
                let (loss, grads) = detector_loss(det, &scene.features, &targets)?;
                batch_loss += loss;
                acc.add(&grads);
                if let Some(t) = teacher {
                    let t_bundle = t.forward(&scene.features, &grid, Role::Teacher);
                    let s_bundle =
                        det.forward_classes(&scene.features, &grid, t.num_classes(), Role::Student);
                    let (dl, dg) = distill_loss_and_grads(
                        &t_bundle,
                        &s_bundle,
                        cfg.distill_mode,
                        &cfg.region,
                        &cfg.weights,
                    )?;
                    batch_loss += dl;
                    acc.add_logit_grads(&dg, &scene.features, det.bins);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { step, epoch });
            }
            det.apply_gradients(&acc, cfg.learning_rate / cfg.batch_size as f64);
        }
    }
    Ok(())
}

/// Runs one protocol end to end and returns metrics for every class
/// group after every trained step.
///
/// `joint` trains once on all classes and reports at the final step
/// index; `finetune` trains steps sequentially with the detector loss
/// only; `r2d` additionally distills against the previous step's frozen
/// detector.
pub fn run_protocol(cfg: &ProtocolConfig, world: &SyntheticWorld) -> Result<SimMetrics> {
    cfg.validate(world)?;
    let mut det = ToyDetector::new(world.cfg.feature_dim, world.cfg.bins, world.cfg.bin_width);
    let mut metrics = SimMetrics::default();
    let last_step = cfg.steps.len() - 1;

    match cfg.protocol {
        Protocol::Joint => {
            let all: Vec<usize> = cfg.steps.iter().flatten().copied().collect();
            det.add_classes(&all);
            train_step(&mut det, None, &all, 0, cfg, world)?;
            for (g, group) in cfg.steps.iter().enumerate() {
                let score = evaluate(&det, world, group)?;
                metrics.rows.push(MetricRow {
                    protocol: cfg.protocol,
                    step: last_step,
                    group: g,
                    score,
                    forgetting: 0.0,
                });
            }
        }
        Protocol::Finetune | Protocol::R2d => {
            let mut intro_scores: Vec<f64> = Vec::with_capacity(cfg.steps.len());
            for (k, group) in cfg.steps.iter().enumerate() {
                let teacher = (cfg.protocol == Protocol::R2d && k > 0).then(|| det.clone());
                det.add_classes(group);
                train_step(&mut det, teacher.as_ref(), group, k, cfg, world)?;
                for (g, eval_group) in cfg.steps.iter().take(k + 1).enumerate() {
                    let score = evaluate(&det, world, eval_group)?;
                    let forgetting = if g == k {
                        intro_scores.push(score);
                        0.0
                    } else {
                        intro_scores[g] - score
                    };
                    metrics.rows.push(MetricRow {
                        protocol: cfg.protocol,
                        step: k,
                        group: g,
                        score,
                        forgetting,
                    });
                }
            }
        }
    }
    Ok(metrics)
}
