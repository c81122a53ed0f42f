//! Distillation losses over refined regions, and their analytic
//! gradients with respect to every student logit.
//!
//! Classification head: high-value nodes get a decoupled KL pair (the
//! teacher-argmax class as a binary split, plus the renormalized
//! non-argmax classes); low-value nodes get an L1 penalty on raw logits.
//! The two are combined with the region-size ratios alpha and beta.
//!
//! Regression head: temperature-softened KL per box edge, a higher
//! temperature on the high-value selection and a lower one on the
//! low-value selection.
//!
//! Regions, quality maps and all ratios are computed from the teacher
//! only, so gradients never flow through region selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{kl_divergence, l1_distance, pairwise_mean, softmax, ProbVector};
use crate::region::{refine_regions, NmsSelection, RegionConfig, RegionPartition};
use crate::response::{ClassificationResponse, RegressionResponse, ResponseBundle};

/// Loss weights and temperatures. All default to the standard settings:
/// every lambda 1, T1 = 10, T2 = 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda6: 1.0,
            t1: 10.0,
            t2: 5.0,
        }
    }
}

/// A class distribution decoupled at index `max_index`: the binary
/// (argmax vs rest) split and the renormalized non-argmax distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledProbs {
    pub max_index: usize,
    pub binary: [f64; 2],
    pub non_max: ProbVector,
}

/// Every loss term of one distillation evaluation, plus the region-size
/// ratios. Serializes to a flat JSON object keyed by these field names.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DistillLossReport {
    pub l_max_cls_high: f64,
    pub l_not_max_cls_high: f64,
    pub l_cls_high: f64,
    pub l_cls_low: f64,
    pub alpha: f64,
    pub beta: f64,
    pub l_cls_distill: f64,
    pub l_reg_high: f64,
    pub l_reg_low: f64,
    pub l_reg_distill: f64,
    pub l_distill_total: f64,
}

impl DistillLossReport {
    /// Field (name, value) pairs in declaration order, for tabular output.
    pub fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("l_max_cls_high", self.l_max_cls_high),
            ("l_not_max_cls_high", self.l_not_max_cls_high),
            ("l_cls_high", self.l_cls_high),
            ("l_cls_low", self.l_cls_low),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("l_cls_distill", self.l_cls_distill),
            ("l_reg_high", self.l_reg_high),
            ("l_reg_low", self.l_reg_low),
            ("l_reg_distill", self.l_reg_distill),
            ("l_distill_total", self.l_distill_total),
        ]
    }
}

/// Which nodes are distilled: the refined high/low pipeline, the raw
/// candidate set as one region, or every node. The latter two exist for
/// ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Refined,
    Candidates,
    All,
}

/// Gradient of the distillation objective with respect to every student
/// logit. Shapes mirror the student bundle; entries for nodes outside the
/// distilled sets are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillGradients {
    pub cls: Vec<Vec<f64>>,
    pub reg: Vec<[Vec<f64>; 4]>,
}

impl DistillGradients {
    fn zeros(nodes: usize, num_classes: usize, bins: usize) -> Self {
        Self {
            cls: vec![vec![0.0; num_classes]; nodes],
            reg: (0..nodes).map(|_| std::array::from_fn(|_| vec![0.0; bins])).collect(),
        }
    }
}

/// Index of the largest logit, ties broken by the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Decouples `z` at index `m`: binary (argmax vs rest) probabilities and
/// the softmax of `z` with index `m` removed.
pub fn decouple_probs(z: &[f64], m: usize) -> Result<DecoupledProbs> {
    if z.len() < 2 {
        return Err(Error::NonMaxSetEmpty);
    }
    debug_assert!(m < z.len());
    let p = softmax(z, 1.0)?;
    let p_max = p.values()[m];
    let p_not_max: f64 =
        p.values().iter().enumerate().filter(|(i, _)| *i != m).map(|(_, &v)| v).sum();
    let reduced: Vec<f64> =
        z.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, &v)| v).collect();
    let non_max = softmax(&reduced, 1.0)?;
    Ok(DecoupledProbs { max_index: m, binary: [p_max, p_not_max], non_max })
}

/// Decoupled classification distillation for one node pair. The teacher's
/// argmax index is used on both sides. Returns
/// `(l_max, l_not_max, lambda3 * l_max + lambda4 * l_not_max)`.
pub fn dcd_loss(teacher_z: &[f64], student_z: &[f64], w: &LossWeights) -> Result<(f64, f64, f64)> {
    if teacher_z.len() != student_z.len() {
        return Err(Error::LengthMismatch { left: teacher_z.len(), right: student_z.len() });
    }
    let m = argmax(teacher_z);
    let t = decouple_probs(teacher_z, m)?;
    let s = decouple_probs(student_z, m)?;
    let l_max = kl_divergence(
        &ProbVector(t.binary.to_vec()),
        &ProbVector(s.binary.to_vec()),
    )?;
    let l_not_max = kl_divergence(&t.non_max, &s.non_max)?;
    Ok((l_max, l_not_max, w.lambda3 * l_max + w.lambda4 * l_not_max))
}

/// Mean over `nodes` of the L1 distance between raw class logits.
pub fn l1_cls_loss(
    teacher: &ClassificationResponse,
    student: &ClassificationResponse,
    nodes: &[usize],
) -> Result<f64> {
    let per_node = nodes
        .iter()
        .map(|&i| l1_distance(&teacher.nodes[i], &student.nodes[i]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&per_node))
}

/// Mean over `nodes` and the four box edges of the KL divergence between
/// temperature-`t` softened edge distributions.
pub fn ld_loss(
    teacher: &RegressionResponse,
    student: &RegressionResponse,
    nodes: &[usize],
    t: f64,
) -> Result<f64> {
    if teacher.bins != student.bins {
        return Err(Error::LengthMismatch { left: teacher.bins, right: student.bins });
    }
    let mut per_edge = Vec::with_capacity(nodes.len() * 4);
    for &i in nodes {
        for e in 0..4 {
            let p = softmax(&teacher.nodes[i][e], t)?;
            let q = softmax(&student.nodes[i][e], t)?;
            per_edge.push(kl_divergence(&p, &q)?);
        }
    }
    Ok(pairwise_mean(&per_edge))
}

/// Classification-head terms for a fixed partition.
pub fn cls_distill_loss(
    teacher: &ClassificationResponse,
    student: &ClassificationResponse,
    partition: &RegionPartition,
    w: &LossWeights,
) -> Result<DistillLossReport> {
    let mut report = DistillLossReport::default();
    if partition.candidates.is_empty() {
        return Ok(report);
    }
    let cand = partition.candidates.len() as f64;
    report.alpha = partition.high.len() as f64 / cand;
    // beta is the low-value ratio; derived from alpha so the pair sums
    // to 1 exactly
    report.beta = 1.0 - report.alpha;

    if !partition.high.is_empty() {
        let mut maxes = Vec::with_capacity(partition.high.len());
        let mut non_maxes = Vec::with_capacity(partition.high.len());
        for &i in &partition.high {
            let (l_max, l_not_max, _) = dcd_loss(&teacher.nodes[i], &student.nodes[i], w)?;
            maxes.push(l_max);
            non_maxes.push(l_not_max);
        }
        report.l_max_cls_high = pairwise_mean(&maxes);
        report.l_not_max_cls_high = pairwise_mean(&non_maxes);
        report.l_cls_high = w.lambda3 * report.l_max_cls_high + w.lambda4 * report.l_not_max_cls_high;
    }
    if !partition.low.is_empty() {
        report.l_cls_low = l1_cls_loss(teacher, student, &partition.low)?;
    }
    report.l_cls_distill = report.alpha * report.l_cls_high + report.beta * report.l_cls_low;
    Ok(report)
}

/// Regression-head terms for fixed NMS selections.
pub fn reg_distill_loss(
    teacher: &RegressionResponse,
    student: &RegressionResponse,
    high: &NmsSelection,
    low: &NmsSelection,
    w: &LossWeights,
) -> Result<(f64, f64, f64)> {
    let l_high =
        if high.kept.is_empty() { 0.0 } else { ld_loss(teacher, student, &high.kept, w.t1)? };
    let l_low = if low.kept.is_empty() { 0.0 } else { ld_loss(teacher, student, &low.kept, w.t2)? };
    Ok((l_high, l_low, w.lambda5 * l_high + w.lambda6 * l_low))
}

fn check_aligned(teacher: &ResponseBundle, student: &ResponseBundle) -> Result<()> {
    if teacher.grid != student.grid {
        return Err(Error::MisalignedDetectors("grids differ".into()));
    }
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::MisalignedDetectors(format!(
            "class counts differ: {} vs {}",
            teacher.num_classes(),
            student.num_classes()
        )));
    }
    if teacher.reg.bins != student.reg.bins || teacher.reg.bin_width != student.reg.bin_width {
        return Err(Error::MisalignedDetectors("regression bin layouts differ".into()));
    }
    Ok(())
}

/// Runs region refinement on the teacher, then evaluates every loss term
/// against the student. The grand total is
/// `lambda1 * l_cls_distill + lambda2 * l_reg_distill`.
pub fn total_distill_loss(
    teacher: &ResponseBundle,
    student: &ResponseBundle,
    cfg: &RegionConfig,
    w: &LossWeights,
) -> Result<DistillLossReport> {
    check_aligned(teacher, student)?;
    let regions = refine_regions(teacher, cfg)?;
    report_for_regions(teacher, student, &regions.cls, &regions.reg_high_kept, &regions.reg_low_kept, w)
}

fn report_for_regions(
    teacher: &ResponseBundle,
    student: &ResponseBundle,
    cls_partition: &RegionPartition,
    reg_high: &NmsSelection,
    reg_low: &NmsSelection,
    w: &LossWeights,
) -> Result<DistillLossReport> {
    let mut report = cls_distill_loss(&teacher.cls, &student.cls, cls_partition, w)?;
    let (l_reg_high, l_reg_low, l_reg_distill) =
        reg_distill_loss(&teacher.reg, &student.reg, reg_high, reg_low, w)?;
    report.l_reg_high = l_reg_high;
    report.l_reg_low = l_reg_low;
    report.l_reg_distill = l_reg_distill;
    report.l_distill_total = w.lambda1 * report.l_cls_distill + w.lambda2 * report.l_reg_distill;
    Ok(report)
}

/// Adds the gradient of one node's decoupled classification loss,
/// scaled by `coeff_max` (argmax KL) and `coeff_nm` (non-argmax KL).
fn accumulate_dcd_grad(
    teacher_z: &[f64],
    student_z: &[f64],
    coeff_max: f64,
    coeff_nm: f64,
    out: &mut [f64],
) -> Result<()> {
    let m = argmax(teacher_z);
    let t = decouple_probs(teacher_z, m)?;
    let s = decouple_probs(student_z, m)?;
    let q = softmax(student_z, 1.0)?;
    let qm = s.binary[0];
    let q_rest = s.binary[1];

    // d l_max / dz_j = (-bT0/qm + bT1/(1-qm)) * qm * (1{j=m} - q_j)
    let a = -t.binary[0] / qm + t.binary[1] / q_rest;
    for (j, g) in out.iter_mut().enumerate() {
        let indicator = if j == m { 1.0 } else { 0.0 };
        *g += coeff_max * a * qm * (indicator - q.values()[j]);
    }
    // d l_not_max / dz_j = s_hat_j - t_hat_j for j != m, 0 at j = m
    let mut r = 0;
    for (j, g) in out.iter_mut().enumerate() {
        if j == m {
            continue;
        }
        *g += coeff_nm * (s.non_max.values()[r] - t.non_max.values()[r]);
        r += 1;
    }
    Ok(())
}

/// Adds the gradient of one edge's temperature-softened KL, scaled by
/// `coeff`: `coeff * (q_j - p_j) / t`.
fn accumulate_ld_grad(
    teacher_edge: &[f64],
    student_edge: &[f64],
    t: f64,
    coeff: f64,
    out: &mut [f64],
) -> Result<()> {
    let p = softmax(teacher_edge, t)?;
    let q = softmax(student_edge, t)?;
    for (g, (&qj, &pj)) in out.iter_mut().zip(q.values().iter().zip(p.values())) {
        *g += coeff * (qj - pj) / t;
    }
    Ok(())
}

/// Analytic gradient of the refined distillation objective with respect
/// to every student logit, along with the loss report. Regions come from
/// the teacher only; nodes outside the distilled sets get zero gradient.
pub fn distill_gradients(
    teacher: &ResponseBundle,
    student: &ResponseBundle,
    cfg: &RegionConfig,
    w: &LossWeights,
) -> Result<(DistillLossReport, DistillGradients)> {
    check_aligned(teacher, student)?;
    let regions = refine_regions(teacher, cfg)?;
    let report = report_for_regions(
        teacher,
        student,
        &regions.cls,
        &regions.reg_high_kept,
        &regions.reg_low_kept,
        w,
    )?;
    let mut grads =
        DistillGradients::zeros(student.node_count(), student.num_classes(), student.reg.bins);

    // classification head
    if !regions.cls.high.is_empty() {
        let scale = w.lambda1 * report.alpha / regions.cls.high.len() as f64;
        for &i in &regions.cls.high {
            accumulate_dcd_grad(
                &teacher.cls.nodes[i],
                &student.cls.nodes[i],
                scale * w.lambda3,
                scale * w.lambda4,
                &mut grads.cls[i],
            )?;
        }
    }
    if !regions.cls.low.is_empty() {
        let scale = w.lambda1 * report.beta / regions.cls.low.len() as f64;
        for &i in &regions.cls.low {
            for ((g, &sz), &tz) in
                grads.cls[i].iter_mut().zip(&student.cls.nodes[i]).zip(&teacher.cls.nodes[i])
            {
                *g += scale * (sz - tz).signum() * if sz == tz { 0.0 } else { 1.0 };
            }
        }
    }

    // regression head
    for (kept, lambda, t) in [
        (&regions.reg_high_kept, w.lambda5, w.t1),
        (&regions.reg_low_kept, w.lambda6, w.t2),
    ] {
        if kept.kept.is_empty() {
            continue;
        }
        let scale = w.lambda2 * lambda / (kept.kept.len() as f64 * 4.0);
        for &i in &kept.kept {
            for e in 0..4 {
                accumulate_ld_grad(
                    &teacher.reg.nodes[i][e],
                    &student.reg.nodes[i][e],
                    t,
                    scale,
                    &mut grads.reg[i][e],
                )?;
            }
        }
    }

    Ok((report, grads))
}

/// Evaluates the distillation objective under an ablation `mode` and
/// returns `(loss, gradient)`. `Refined` is the full high/low pipeline;
/// `Candidates` distills the raw candidate set as a single region (L1 on
/// the classification head, T1-softened KL on the regression head);
/// `All` does the same over every node.
pub fn distill_loss_and_grads(
    teacher: &ResponseBundle,
    student: &ResponseBundle,
    mode: DistillMode,
    cfg: &RegionConfig,
    w: &LossWeights,
) -> Result<(f64, DistillGradients)> {
    if mode == DistillMode::Refined {
        let (report, grads) = distill_gradients(teacher, student, cfg, w)?;
        return Ok((report.l_distill_total, grads));
    }
    check_aligned(teacher, student)?;
    let nodes: Vec<usize> = match mode {
        DistillMode::Candidates => {
            let q = crate::response::classification_quality(&teacher.cls)?;
            crate::region::select_candidates(&q, cfg.theta)
        }
        DistillMode::All => (0..teacher.node_count()).collect(),
        DistillMode::Refined => unreachable!(),
    };
    let mut grads =
        DistillGradients::zeros(student.node_count(), student.num_classes(), student.reg.bins);
    if nodes.is_empty() {
        return Ok((0.0, grads));
    }
    let l_cls = l1_cls_loss(&teacher.cls, &student.cls, &nodes)?;
    let l_reg = ld_loss(&teacher.reg, &student.reg, &nodes, w.t1)?;
    let cls_scale = w.lambda1 / nodes.len() as f64;
    let reg_scale = w.lambda2 / (nodes.len() as f64 * 4.0);
    for &i in &nodes {
        for ((g, &sz), &tz) in
            grads.cls[i].iter_mut().zip(&student.cls.nodes[i]).zip(&teacher.cls.nodes[i])
        {
            *g += cls_scale * (sz - tz).signum() * if sz == tz { 0.0 } else { 1.0 };
        }
        for e in 0..4 {
            accumulate_ld_grad(
                &teacher.reg.nodes[i][e],
                &student.reg.nodes[i][e],
                w.t1,
                reg_scale,
                &mut grads.reg[i][e],
            )?;
        }
    }
    Ok((w.lambda1 * l_cls + w.lambda2 * l_reg, grads))
}

/// Compares the analytic gradient against central finite differences of
/// the loss (step `h`) and returns the maximum relative error over all
/// student logits. The relative error uses
/// `|a - n| / max(|a|, |n|, 1e-3)` so that near-zero coordinates are held
/// to a matching absolute tolerance.
pub fn gradcheck(
    teacher: &ResponseBundle,
    student: &ResponseBundle,
    cfg: &RegionConfig,
    w: &LossWeights,
    h: f64,
) -> Result<f64> {
    let (_, grads) = distill_gradients(teacher, student, cfg, w)?;
    let mut probe = student.clone();
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    };
    for i in 0..student.node_count() {
        for c in 0..student.num_classes() {
            let orig = probe.cls.nodes[i][c];
            probe.cls.nodes[i][c] = orig + h;
            let plus = total_distill_loss(teacher, &probe, cfg, w)?.l_distill_total;
            probe.cls.nodes[i][c] = orig - h;
            let minus = total_distill_loss(teacher, &probe, cfg, w)?.l_distill_total;
            probe.cls.nodes[i][c] = orig;
            check(grads.cls[i][c], plus, minus);
        }
        for e in 0..4 {
            for k in 0..student.reg.bins {
                let orig = probe.reg.nodes[i][e][k];
                probe.reg.nodes[i][e][k] = orig + h;
                let plus = total_distill_loss(teacher, &probe, cfg, w)?.l_distill_total;
                probe.reg.nodes[i][e][k] = orig - h;
                let minus = total_distill_loss(teacher, &probe, cfg, w)?.l_distill_total;
                probe.reg.nodes[i][e][k] = orig;
                check(grads.reg[i][e][k], plus, minus);
            }
        }
    }
    Ok(worst)
}
