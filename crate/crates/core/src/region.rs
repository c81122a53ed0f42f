//! Coarse-to-fine distillation region division.
//!
//! Candidate nodes are selected by thresholding classification quality;
//! a two-component 1-D Gaussian mixture fitted by EM splits the
//! candidates into high-value and low-value subsets per head; decoded
//! boxes of the regression subsets are deduplicated with greedy NMS.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::response::{
    classification_quality, decode_box, regression_quality, DecodedBox, Head, NodeGrid,
    QualityScores, ResponseBundle,
};

/// Tunables for region division. Defaults: theta 0.05, NMS IoU 0.6,
/// EM capped at 100 iterations with 1e-6 log-likelihood tolerance and a
/// 1e-8 variance floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub theta: f64,
    pub nms_iou: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub variance_floor: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { theta: 0.05, nms_iou: 0.6, em_max_iters: 100, em_tol: 1e-6, variance_floor: 1e-8 }
    }
}

/// A fitted two-component 1-D Gaussian mixture. Components are ordered by
/// ascending mean; `responsibilities[i]` holds the posterior of each
/// component for input point `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub responsibilities: Vec<[f64; 2]>,
    pub log_likelihood_trace: Vec<f64>,
    pub degenerate: bool,
}

/// Candidate node set split into high-value and low-value subsets for one
/// head. All three index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub head: Head,
    pub candidates: Vec<usize>,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

impl RegionPartition {
    pub fn empty(head: Head) -> Self {
        Self { head, candidates: Vec::new(), high: Vec::new(), low: Vec::new() }
    }
}

/// Node indices surviving NMS, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmsSelection {
    pub kept: Vec<usize>,
}

/// Output of the full region refinement pipeline on a teacher bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedRegions {
    pub cls: RegionPartition,
    pub reg: RegionPartition,
    pub reg_high_kept: NmsSelection,
    pub reg_low_kept: NmsSelection,
}

/// Indices whose quality strictly exceeds `theta`, ascending.
pub fn select_candidates(q: &QualityScores, theta: f64) -> Vec<usize> {
    q.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > theta)
        .map(|(i, _)| i)
        .collect()
}

fn percentile(sorted: &[f64], frac: f64) -> f64 {
    let pos = frac * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = pos - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    }
}

fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (TAU * variance).ln() - (x - mean) * (x - mean) / (2.0 * variance)
}

/// Fits a two-component 1-D Gaussian mixture by EM.
///
/// The components share one variance (tied), which keeps the posterior
/// ratio monotone in the value: the high/low assignment downstream is
/// then always a clean threshold split, so the higher-mean subset also
/// has the higher mean quality. Means initialize at the 20th/80th
/// percentiles with equal weights and the (floored) sample variance.
/// Iteration stops at `em_max_iters` or when the log-likelihood
/// improves by less than `em_tol`. Inputs with spread below 1e-12 yield
/// a degenerate single-component model.
pub fn fit_gmm(values: &[f64], cfg: &RegionConfig) -> Result<GmmModel> {
    if values.is_empty() {
        return Err(Error::NoCandidateValues);
    }
    let n = values.len();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        let m = values[0];
        return Ok(GmmModel {
            weights: [0.0, 1.0],
            means: [m, m],
            variances: [cfg.variance_floor, cfg.variance_floor],
            responsibilities: vec![[0.0, 1.0]; n],
            log_likelihood_trace: Vec::new(),
            degenerate: true,
        });
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut means = [percentile(&sorted, 0.2), percentile(&sorted, 0.8)];
    if means[1] - means[0] < 1e-12 {
        means = [min, max];
    }
    let sample_mean: f64 = values.iter().sum::<f64>() / n as f64;
    let sample_var: f64 =
        values.iter().map(|v| (v - sample_mean) * (v - sample_mean)).sum::<f64>() / n as f64;
    let mut variances = [sample_var.max(cfg.variance_floor); 2];
    let mut weights: [f64; 2] = [0.5, 0.5];

    let mut resp = vec![[0.5, 0.5]; n];
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;

    for _ in 0..cfg.em_max_iters {
        // E-step in log space
        let mut ll = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let lp: [f64; 2] = std::array::from_fn(|k| {
                if weights[k] > 0.0 {
                    weights[k].ln() + log_normal_pdf(x, means[k], variances[k])
                } else {
                    f64::NEG_INFINITY
                }
            });
            let m = lp[0].max(lp[1]);
            let denom = (lp[0] - m).exp() + (lp[1] - m).exp();
            ll += m + denom.ln();
            resp[i] = [(lp[0] - m).exp() / denom, (lp[1] - m).exp() / denom];
        }
        trace.push(ll);

        // M-step with a tied variance
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            weights[k] = nk / n as f64;
            if nk > 0.0 {
                means[k] = values.iter().zip(&resp).map(|(&x, r)| r[k] * x).sum::<f64>() / nk;
            }
        }
        let pooled = values
            .iter()
            .zip(&resp)
            .map(|(&x, r)| {
                r[0] * (x - means[0]) * (x - means[0]) + r[1] * (x - means[1]) * (x - means[1])
            })
            .sum::<f64>()
            / n as f64;
        variances = [pooled.max(cfg.variance_floor); 2];

        if ll - prev_ll < cfg.em_tol && prev_ll.is_finite() {
            break;
        }
        prev_ll = ll;
    }

    // order components by ascending mean
    if means[0] > means[1] {
        means.swap(0, 1);
        weights.swap(0, 1);
        variances.swap(0, 1);
        for r in &mut resp {
            r.swap(0, 1);
        }
    }

    Ok(GmmModel {
        weights,
        means,
        variances,
        responsibilities: resp,
        log_likelihood_trace: trace,
        degenerate: false,
    })
}

/// Splits `candidates` into high-value and low-value subsets by fitting a
/// mixture on their qualities and assigning each candidate to the
/// component of higher posterior. The larger-mean component is
/// high-value; exact posterior ties go high; a degenerate fit puts every
/// candidate in the high subset.
pub fn partition(
    q: &QualityScores,
    candidates: &[usize],
    cfg: &RegionConfig,
) -> Result<RegionPartition> {
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let values: Vec<f64> = sorted.iter().map(|&i| q.values[i]).collect();
    let model = fit_gmm(&values, cfg)?;

    let mut high = Vec::new();
    let mut low = Vec::new();
    if model.degenerate {
        high = sorted.clone();
    } else {
        for (&idx, r) in sorted.iter().zip(&model.responsibilities) {
            // component 1 has the larger mean after ordering
            if r[1] >= r[0] {
                high.push(idx);
            } else {
                low.push(idx);
            }
        }
    }
    Ok(RegionPartition { head: q.head, candidates: sorted, high, low })
}

/// Greedy non-maximum suppression over `(node index, box)` pairs.
///
/// Boxes are visited by descending score (ties broken by lower node
/// index); a box is dropped iff its IoU with an already-kept box strictly
/// exceeds `iou_thr`. Kept node indices return sorted ascending.
pub fn nms(boxes: &[(usize, DecodedBox)], iou_thr: f64) -> NmsSelection {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b].1.score.partial_cmp(&boxes[a].1.score).unwrap().then(boxes[a].0.cmp(&boxes[b].0))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_boxes: Vec<&DecodedBox> = Vec::new();
    for &i in &order {
        let (node, ref bx) = boxes[i];
        if kept_boxes.iter().all(|kb| kb.iou(bx) <= iou_thr) {
            kept.push(node);
            kept_boxes.push(bx);
        }
    }
    kept.sort_unstable();
    NmsSelection { kept }
}

/// Runs the full division pipeline on a teacher bundle: quality maps,
/// candidate thresholding, per-head mixture splits over the shared
/// candidate set, then NMS inside the regression subsets using decoded
/// boxes scored by classification quality.
pub fn refine_regions(teacher: &ResponseBundle, cfg: &RegionConfig) -> Result<RefinedRegions> {
    teacher.validate()?;
    let q_cls = classification_quality(&teacher.cls)?;
    let q_reg = regression_quality(&q_cls, &teacher.reg)?;
    let candidates = select_candidates(&q_cls, cfg.theta);
    if candidates.is_empty() {
        return Ok(RefinedRegions {
            cls: RegionPartition::empty(Head::Cls),
            reg: RegionPartition::empty(Head::Reg),
            reg_high_kept: NmsSelection { kept: Vec::new() },
            reg_low_kept: NmsSelection { kept: Vec::new() },
        });
    }
    let cls = partition(&q_cls, &candidates, cfg)?;
    let reg = partition(&q_reg, &candidates, cfg)?;

    let decode_set = |nodes: &[usize]| -> Result<Vec<(usize, DecodedBox)>> {
        nodes
            .iter()
            .map(|&i| Ok((i, decode_box(i, &teacher.grid, &teacher.reg, q_cls.values[i])?)))
            .collect()
    };
    let reg_high_kept = nms(&decode_set(&reg.high)?, cfg.nms_iou);
    let reg_low_kept = nms(&decode_set(&reg.low)?, cfg.nms_iou);

    Ok(RefinedRegions { cls, reg, reg_high_kept, reg_low_kept })
}

/// Writes a `height x width` CSV matrix for one grid level: 0 outside the
/// partition, 1 candidate-low, 2 candidate-high.
pub fn export_region_raster(
    partition: &RegionPartition,
    grid: &NodeGrid,
    level: usize,
    path: &Path,
) -> Result<()> {
    if level >= grid.levels.len() {
        return Err(Error::LevelOutOfRange { level, levels: grid.levels.len() });
    }
    let l = &grid.levels[level];
    let offset = grid.level_offset(level);
    let count = l.width * l.height;
    let mut cells = vec![0u8; count];
    for &i in &partition.low {
        if i >= offset && i < offset + count {
            cells[i - offset] = 1;
        }
    }
    for &i in &partition.high {
        if i >= offset && i < offset + count {
            cells[i - offset] = 2;
        }
    }
    let mut out = String::new();
    for row in 0..l.height {
        let line: Vec<String> =
            (0..l.width).map(|col| cells[row * l.width + col].to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
