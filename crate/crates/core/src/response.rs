//! Detector response data model: grid geometry, per-node head outputs,
//! and per-node distillation quality for both heads.
//!
//! A *node* is one spatial location on one feature-map level. Node order
//! is level-major, row-major. Responses arrive as raw logits: one length-N
//! class vector per node on the classification head, and four length-M
//! distance-bin vectors per node (edge order top, bottom, left, right) on
//! the regression head.
//!
//! Bundle JSON schema (used by the CLI for fixtures):
//!
//! ```json
//! {
//!   "grid": {"levels": [{"w": 8, "h": 8, "stride": 8.0}]},
//!   "cls":  [[...N logits...], ...one row per node...],
//!   "reg":  {"bins": 8, "bin_width": 0.5,
//!            "nodes": [[[...M...],[...M...],[...M...],[...M...]], ...]}
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{entropy_bits, sigmoid, softmax};

/// One feature-map level: `width x height` nodes at `stride` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
    pub stride: f64,
}

/// Grid locations across levels. Node order is level-major, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGrid {
    pub levels: Vec<GridLevel>,
}

impl NodeGrid {
    /// Single-level grid.
    pub fn single(width: usize, height: usize, stride: f64) -> Self {
        Self { levels: vec![GridLevel { width, height, stride }] }
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(|l| l.width * l.height).sum()
    }

    /// First node index of `level`.
    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|l| l.width * l.height).sum()
    }

    /// (level, row, col) of a node index.
    pub fn locate(&self, index: usize) -> Result<(usize, usize, usize)> {
        let mut rem = index;
        for (li, l) in self.levels.iter().enumerate() {
            let n = l.width * l.height;
            if rem < n {
                return Ok((li, rem / l.width, rem % l.width));
            }
            rem -= n;
        }
        Err(Error::NodeOutOfRange { index, nodes: self.node_count() })
    }

    /// Pixel center of a node: `((col+0.5)*stride, (row+0.5)*stride)`.
    pub fn node_center(&self, index: usize) -> Result<(f64, f64, f64)> {
        let (level, row, col) = self.locate(index)?;
        let stride = self.levels[level].stride;
        Ok(((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride, stride))
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidBundle("grid has no levels".into()));
        }
        let mut prev = 0.0;
        for l in &self.levels {
            if l.width < 1 || l.height < 1 {
                return Err(Error::InvalidBundle("level with zero width or height".into()));
            }
            // NaN strides must fail this comparison too
            if l.stride.partial_cmp(&prev) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::InvalidBundle(
                    "strides must be positive and strictly increasing across levels".into(),
                ));
            }
            prev = l.stride;
        }
        Ok(())
    }
}

/// Per-node class logits, length N each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassificationResponse {
    pub nodes: Vec<Vec<f64>>,
}

impl ClassificationResponse {
    pub fn num_classes(&self) -> usize {
        self.nodes.first().map_or(0, Vec::len)
    }
}

/// Per-node general distributions over M distance bins, one per box edge.
/// Edge order: top, bottom, left, right. `bin_width` is in stride units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResponse {
    pub bins: usize,
    pub bin_width: f64,
    pub nodes: Vec<[Vec<f64>; 4]>,
}

/// Which detector produced a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Teacher,
    Student,
}

/// Which head a quality map or partition refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Cls,
    Reg,
}

/// One detector's full per-image response: grid plus both heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBundle {
    pub grid: NodeGrid,
    pub cls: ClassificationResponse,
    pub reg: RegressionResponse,
    #[serde(skip)]
    pub role: Role,
}

impl ResponseBundle {
    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    pub fn num_classes(&self) -> usize {
        self.cls.num_classes()
    }

    /// Checks all structural invariants.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let nodes = self.grid.node_count();
        if self.cls.nodes.len() != nodes {
            return Err(Error::InvalidBundle(format!(
                "cls has {} nodes, grid has {nodes}",
                self.cls.nodes.len()
            )));
        }
        if self.reg.nodes.len() != nodes {
            return Err(Error::InvalidBundle(format!(
                "reg has {} nodes, grid has {nodes}",
                self.reg.nodes.len()
            )));
        }
        let n = self.cls.num_classes();
        if n < 1 {
            return Err(Error::InvalidBundle("no classes".into()));
        }
        if self.cls.nodes.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidBundle("ragged classification logits".into()));
        }
        if self.reg.bins < 2 {
            return Err(Error::InvalidBundle("regression needs at least 2 bins".into()));
        }
        for edges in &self.reg.nodes {
            if edges.iter().any(|e| e.len() != self.reg.bins) {
                return Err(Error::InvalidBundle("edge distribution length != bins".into()));
            }
        }
        Ok(())
    }

    /// Loads and validates a bundle from JSON, attaching `role`.
    pub fn load(path: &Path, role: Role) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut bundle: ResponseBundle = serde_json::from_str(&text)?;
        bundle.role = role;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-node distillation quality for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub head: Head,
    pub values: Vec<f64>,
}

/// An axis-aligned box in pixels with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl DecodedBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &DecodedBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Classification-head quality: per node, the maximum over classes of
/// `sigmoid(logit)`.
pub fn classification_quality(cls: &ClassificationResponse) -> Result<QualityScores> {
    if cls.num_classes() == 0 {
        return Err(Error::NoClasses);
    }
    let values = cls
        .nodes
        .iter()
        .map(|logits| logits.iter().copied().map(sigmoid).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(QualityScores { head: Head::Cls, values })
}

/// Regression-head quality: per node, `-ln(1 - Q_cls)` times the maximum
/// over the four edge distributions of their entropy in bits (edges
/// softened at temperature 1 first).
pub fn regression_quality(q_cls: &QualityScores, reg: &RegressionResponse) -> Result<QualityScores> {
    if q_cls.values.len() != reg.nodes.len() {
        return Err(Error::LengthMismatch { left: q_cls.values.len(), right: reg.nodes.len() });
    }
    let mut values = Vec::with_capacity(reg.nodes.len());
    for (&q, edges) in q_cls.values.iter().zip(&reg.nodes) {
        if q >= 1.0 {
            return Err(Error::DegenerateConfidence(q));
        }
        let max_entropy = edges
            .iter()
            .map(|e| softmax(e, 1.0).map(|p| entropy_bits(&p)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        values.push(-(1.0 - q).ln() * max_entropy);
    }
    Ok(QualityScores { head: Head::Reg, values })
}

/// Decodes the box at `node_index` from its edge distributions.
///
/// Each edge distance is the distribution expectation
/// `sum_k k * softmax(edge)_k` scaled by `bin_width * stride`; the box is
/// the node center pushed out by the four distances. `score` is attached
/// unchanged.
pub fn decode_box(
    node_index: usize,
    grid: &NodeGrid,
    reg: &RegressionResponse,
    score: f64,
) -> Result<DecodedBox> {
    let (cx, cy, stride) = grid.node_center(node_index)?;
    let edges = &reg.nodes[node_index];
    let mut dist = [0.0; 4];
    for (d, edge) in dist.iter_mut().zip(edges.iter()) {
        let p = softmax(edge, 1.0)?;
        let expectation: f64 =
            p.values().iter().enumerate().map(|(k, &pk)| k as f64 * pk).sum();
        *d = expectation * reg.bin_width * stride;
    }
    let [top, bottom, left, right] = dist;
    Ok(DecodedBox { x1: cx - left, y1: cy - top, x2: cx + right, y2: cy + bottom, score })
}

/// Synthetic bundle with seeded random logits; handy for fixtures,
/// benches and property tests.
pub fn random_bundle(
    grid: NodeGrid,
    num_classes: usize,
    bins: usize,
    bin_width: f64,
    logit_scale: f64,
    seed: u64,
) -> ResponseBundle {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nodes = grid.node_count();
    let cls = ClassificationResponse {
        nodes: (0..nodes)
            .map(|_| (0..num_classes).map(|_| rng.random_range(-logit_scale..logit_scale)).collect())
            .collect(),
    };
    let reg = RegressionResponse {
        bins,
        bin_width,
        nodes: (0..nodes)
            .map(|_| {
                std::array::from_fn(|_| {
                    (0..bins).map(|_| rng.random_range(-logit_scale..logit_scale)).collect()
                })
            })
            .collect(),
    };
    ResponseBundle { grid, cls, reg, role: Role::Teacher }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid_2level() -> NodeGrid {
        NodeGrid {
            levels: vec![
                GridLevel { width: 4, height: 3, stride: 8.0 },
                GridLevel { width: 2, height: 2, stride: 16.0 },
            ],
        }
    }

    #[test]
    fn node_order_is_level_major_row_major() {
        let g = grid_2level();
        assert_eq!(g.node_count(), 16);
        assert_eq!(g.locate(0).unwrap(), (0, 0, 0));
        assert_eq!(g.locate(5).unwrap(), (0, 1, 1));
        assert_eq!(g.locate(12).unwrap(), (1, 0, 0));
        assert_eq!(g.locate(15).unwrap(), (1, 1, 1));
        assert!(g.locate(16).is_err());
        // centers: (col+0.5)*stride
        let (x, y, s) = g.node_center(5).unwrap();
        assert_eq!((x, y, s), (12.0, 12.0, 8.0));
        let (x, y, s) = g.node_center(12).unwrap();
        assert_eq!((x, y, s), (8.0, 8.0, 16.0));
    }

    #[test]
    fn classification_quality_examples() {
        let cls = ClassificationResponse {
            nodes: vec![vec![0.0, 0.0, 0.0], vec![2.0, -1.0, 0.0], vec![-4.0, -4.0, -4.0]],
        };
        let q = classification_quality(&cls).unwrap();
        assert_abs_diff_eq!(q.values[0], 0.5);
        assert_abs_diff_eq!(q.values[1], 0.880797, epsilon = 5e-7);
        assert_abs_diff_eq!(q.values[2], 0.017986, epsilon = 5e-7);
        assert!(q.values[2] < 0.05);
    }

    #[test]
    fn classification_quality_no_classes_errors() {
        let cls = ClassificationResponse { nodes: vec![vec![]] };
        assert!(matches!(classification_quality(&cls), Err(Error::NoClasses)));
    }

    #[test]
    fn classification_quality_permutation_invariant() {
        let a = ClassificationResponse { nodes: vec![vec![0.3, -1.2, 2.0]] };
        let b = ClassificationResponse { nodes: vec![vec![2.0, 0.3, -1.2]] };
        assert_eq!(
            classification_quality(&a).unwrap().values,
            classification_quality(&b).unwrap().values
        );
    }

    fn uniform_reg(nodes: usize, bins: usize) -> RegressionResponse {
        RegressionResponse {
            bins,
            bin_width: 0.5,
            nodes: (0..nodes).map(|_| std::array::from_fn(|_| vec![0.0; bins])).collect(),
        }
    }

    #[test]
    fn regression_quality_zero_confidence_gives_zero() {
        // sigmoid never yields exactly 0, so inject a synthetic quality map
        let q = QualityScores { head: Head::Cls, values: vec![0.0] };
        let out = regression_quality(&q, &uniform_reg(1, 8)).unwrap();
        assert_eq!(out.values[0], 0.0);
    }

    #[test]
    fn regression_quality_near_one_hot_edges() {
        let mut reg = uniform_reg(1, 8);
        for e in reg.nodes[0].iter_mut() {
            e[3] = 60.0; // entropy of the softened edge is < 1e-6 bits
        }
        let q = QualityScores { head: Head::Cls, values: vec![0.5] };
        let out = regression_quality(&q, &reg).unwrap();
        assert!(out.values[0] < 1e-6 * -(1.0f64 - 0.5).ln());
    }

    #[test]
    fn regression_quality_uniform_edges_m8() {
        let q = QualityScores { head: Head::Cls, values: vec![0.5] };
        let out = regression_quality(&q, &uniform_reg(1, 8)).unwrap();
        assert_abs_diff_eq!(out.values[0], 2.079442, epsilon = 5e-7);
        assert_abs_diff_eq!(out.values[0], -(0.5f64.ln()) * 3.0, epsilon = 1e-12);
    }

    #[test]
    fn regression_quality_monotone_in_confidence() {
        let reg = uniform_reg(1, 8);
        let lo = regression_quality(&QualityScores { head: Head::Cls, values: vec![0.3] }, &reg)
            .unwrap();
        let hi = regression_quality(&QualityScores { head: Head::Cls, values: vec![0.7] }, &reg)
            .unwrap();
        assert!(hi.values[0] > lo.values[0]);
    }

    #[test]
    fn regression_quality_bounded_by_log2_m() {
        let bundle = random_bundle(NodeGrid::single(5, 5, 8.0), 4, 8, 0.5, 4.0, 7);
        let q = classification_quality(&bundle.cls).unwrap();
        let r = regression_quality(&q, &bundle.reg).unwrap();
        for (&qr, &qc) in r.values.iter().zip(&q.values) {
            assert!(qr >= 0.0);
            assert!(qr <= -(1.0 - qc).ln() * 8.0f64.log2() + 1e-12);
        }
    }

    #[test]
    fn decode_box_one_hot_and_uniform() {
        let grid = NodeGrid::single(2, 2, 8.0);
        let mut reg = uniform_reg(4, 8);
        // one-hot at bin 4 on every edge of node 0
        for e in reg.nodes[0].iter_mut() {
            *e = vec![-1e3; 8];
            e[4] = 1e3;
        }
        let b = decode_box(0, &grid, &reg, 0.9).unwrap();
        // distance = 4 * 0.5 * 8 = 16 in every direction from center (4,4)
        assert_abs_diff_eq!(b.x1, 4.0 - 16.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.y2, 4.0 + 16.0, epsilon = 1e-9);
        assert_eq!(b.score, 0.9);

        // uniform edges: distance = (M-1)/2 * bin_width * stride = 14
        let u = decode_box(1, &grid, &reg, 0.5).unwrap();
        assert_abs_diff_eq!(u.x2 - u.x1, 2.0 * 14.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.y2 - u.y1, 2.0 * 14.0, epsilon = 1e-12);
    }

    #[test]
    fn decode_box_matches_expectation_oracle() {
        let bundle = random_bundle(NodeGrid::single(3, 3, 4.0), 2, 6, 0.25, 3.0, 11);
        for i in 0..bundle.node_count() {
            let b = decode_box(i, &bundle.grid, &bundle.reg, 0.5).unwrap();
            let (cx, cy, stride) = bundle.grid.node_center(i).unwrap();
            // brute-force expectation per edge
            let expect = |edge: &[f64]| {
                let m = edge.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = edge.iter().map(|z| (z - m).exp()).collect();
                let s: f64 = exps.iter().sum();
                exps.iter().enumerate().map(|(k, e)| k as f64 * e / s).sum::<f64>()
                    * bundle.reg.bin_width
                    * stride
            };
            let edges = &bundle.reg.nodes[i];
            assert_abs_diff_eq!(b.y1, cy - expect(&edges[0]), epsilon = 1e-12);
            assert_abs_diff_eq!(b.y2, cy + expect(&edges[1]), epsilon = 1e-12);
            assert_abs_diff_eq!(b.x1, cx - expect(&edges[2]), epsilon = 1e-12);
            assert_abs_diff_eq!(b.x2, cx + expect(&edges[3]), epsilon = 1e-12);
            assert!(b.x1 <= b.x2 && b.y1 <= b.y2);
        }
    }

    #[test]
    fn bundle_json_round_trip() {
        let bundle = random_bundle(grid_2level(), 5, 6, 0.5, 5.0, 3);
        let text = serde_json::to_string(&bundle).unwrap();
        let back: ResponseBundle = serde_json::from_str(&text).unwrap();
        // serde_json emits shortest round-trip decimals: reals survive exactly
        assert_eq!(bundle.grid, back.grid);
        assert_eq!(bundle.cls, back.cls);
        assert_eq!(bundle.reg, back.reg);
        // schema field names are as documented
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["grid"]["levels"][0]["w"].is_u64());
        assert!(v["grid"]["levels"][0]["h"].is_u64());
        assert!(v["reg"]["bins"].is_u64());
        assert!(v["reg"]["bin_width"].is_number());
        assert!(v["cls"].is_array());
        assert!(v["reg"]["nodes"][0].as_array().unwrap().len() == 4);
    }

    #[test]
    fn validate_rejects_bad_bundles() {
        let mut b = random_bundle(NodeGrid::single(2, 2, 8.0), 3, 4, 0.5, 2.0, 1);
        assert!(b.validate().is_ok());
        b.cls.nodes.pop();
        assert!(b.validate().is_err());

        let mut b = random_bundle(grid_2level(), 3, 4, 0.5, 2.0, 1);
        b.grid.levels[1].stride = 8.0; // not strictly increasing
        assert!(b.validate().is_err());
    }
}
