//! Loss components with analytic gradients and the uncertainty-weighted
//! multi-task total.
//!
//! Every function returns `(value, gradient)`; gradients are with respect to
//! the first argument (logits, probabilities or predictions).

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::softmax;

/// Fixed weights of the heatmap, regression and IoU terms inside `L_DET`.
pub const DET_LOSS_WEIGHTS: [f64; 3] = [1.0, 2.0, 1.0];
/// Focal exponents `(alpha, beta)` of the penalty-reduced heatmap loss.
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const FOCAL_EPS: f64 = 1e-6;

fn check_rows(rows: usize, labels: usize, ignore: usize) -> Result<()> {
    if rows != labels || rows != ignore {
        return Err(Error::input(format!("{rows} rows, {labels} labels, {ignore} ignore flags")));
    }
    Ok(())
}

/// Mean of `-log softmax(logits)[label]` over rows not flagged in `ignore`.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize], ignore: &[bool]) -> Result<(f64, Array2<f64>)> {
    check_rows(logits.nrows(), labels.len(), ignore.len())?;
    let k = logits.ncols();
    let mut grad = Array2::zeros(logits.raw_dim());
    let count = ignore.iter().filter(|&&i| !i).count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, (&y, &skip)) in labels.iter().zip(ignore).enumerate() {
        if skip {
            continue;
        }
        if y >= k {
            return Err(Error::input(format!("label {y} at row {i} outside {k} classes")));
        }
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        let p = softmax(row);
        let mut g = grad.row_mut(i);
        g.assign(&p);
        g[y] -= 1.0;
    }
    let n = count as f64;
    grad /= n;
    Ok((total / n, grad))
}

/// Gradient of the Jaccard loss Lovasz extension for a ground-truth
/// indicator already sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[f64]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().sum();
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        cum_fg += g;
        cum_bg += 1.0 - g;
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovasz-softmax over the classes present in the (non-ignored) labels.
///
/// For class `c` the per-row error is `|[y = c] - p(c)|`; errors are sorted
/// in decreasing order (ties by row) and dotted with [`lovasz_grad`].
pub fn lovasz_softmax(probs: ArrayView2<f64>, labels: &[usize], ignore: &[bool]) -> Result<(f64, Array2<f64>)> {
    check_rows(probs.nrows(), labels.len(), ignore.len())?;
    let k = probs.ncols();
    let mut grad = Array2::zeros(probs.raw_dim());
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| !ignore[i]).collect();
    if let Some(&bad) = rows.iter().find(|&&i| labels[i] >= k) {
        return Err(Error::input(format!("label {} at row {bad} outside {k} classes", labels[bad])));
    }
    let mut present = vec![false; k];
    for &i in &rows {
        present[labels[i]] = true;
    }
    let classes: Vec<usize> = (0..k).filter(|&c| present[c]).collect();
    if classes.is_empty() {
        return Ok((0.0, grad));
    }
    let nc = classes.len() as f64;
    let mut total = 0.0;
    for &c in &classes {
        let mut errs: Vec<(f64, f64, f64, usize)> = rows
            .iter()
            .map(|&i| {
                let fg = if labels[i] == c { 1.0 } else { 0.0 };
                let d = probs[[i, c]] - fg;
                (d.abs(), fg, d.signum() * (d != 0.0) as u8 as f64, i)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.3.cmp(&b.3)));
        let gt_sorted: Vec<f64> = errs.iter().map(|e| e.1).collect();
        let g = lovasz_grad(&gt_sorted);
        for ((e, _, sign, i), w) in errs.iter().zip(&g) {
            total += e * w;
            grad[[*i, c]] += sign * w / nc;
        }
    }
    Ok((total / nc, grad))
}

/// Penalty-reduced focal loss on a heatmap, normalized by the number of
/// unit-target cells (at least 1).
pub fn gaussian_focal(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::input(format!("heatmap sizes differ: {} vs {}", pred.len(), target.len())));
    }
    let num_pos = target.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p_raw, &t)) in pred.iter().zip(target).enumerate() {
        let p = p_raw.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let active = p == p_raw;
        let (l, g) = if t == 1.0 {
            let q = 1.0 - p;
            (-q.powf(a) * p.ln(), a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p)
        } else {
            let w = (1.0 - t).powf(b);
            let lq = (1.0 - p).ln();
            (-w * p.powf(a) * lq, -w * (a * p.powf(a - 1.0) * lq - p.powf(a) / (1.0 - p)))
        };
        total += l;
        if active {
            grad[i] = g / num_pos;
        }
    }
    Ok((total / num_pos, grad))
}

/// Mean absolute error over `mask`; subgradient 0 at exact ties.
pub fn l1_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::input("l1 inputs differ in length"));
    }
    let n = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; pred.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] - target[i];
            total += d.abs();
            grad[i] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            } / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Mean binary cross-entropy over `mask`, with probabilities clamped away from 0 and 1.
pub fn binary_cross_entropy(prob: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if prob.len() != target.len() || prob.len() != mask.len() {
        return Err(Error::input("binary cross-entropy inputs differ in length"));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = (0..prob.len())
        .filter(|&i| mask[i])
        .map(|i| {
            let p = prob[i].clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
            -(target[i] * p.ln() + (1.0 - target[i]) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / n as f64)
}

/// `L_DET = 1 * hm + 2 * reg + 1 * iou`.
pub fn group_det(hm: f64, reg: f64, iou: f64) -> f64 {
    let [a, b, c] = DET_LOSS_WEIGHTS;
    a * hm + b * reg + c * iou
}

/// Uncertainty weighting `sum_i L_i exp(-s_i) / 2 + s_i / 2` with
/// `s_i = log sigma_i^2`; returns the total and `d total / d s_i`.
pub fn uncertainty_weighted(losses: &[f64], log_vars: &[f64]) -> Result<(f64, Vec<f64>)> {
    if losses.len() != log_vars.len() {
        return Err(Error::config(format!(
            "{} losses but {} uncertainty parameters",
            losses.len(),
            log_vars.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(losses.len());
    for (&l, &s) in losses.iter().zip(log_vars) {
        let w = (-s).exp() / 2.0;
        total += l * w + s / 2.0;
        grad.push(-l * w + 0.5);
    }
    Ok((total, grad))
}

/// Weight `exp(-s) / 2` that a loss receives, i.e. `d total / d L`.
pub fn loss_weight(log_var: f64) -> f64 {
    (-log_var).exp() / 2.0
}

/// Log-variances of the three task groups.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UncertaintyParams {
    pub seg: f64,
    pub det: f64,
    pub bev: f64,
}

impl UncertaintyParams {
    pub fn as_array(&self) -> [f64; 3] {
        [self.seg, self.det, self.bev]
    }
}

/// Grouped three-task combination; gradient order is `(seg, det, bev)`.
pub fn total_uncertainty_loss(l_seg: f64, l_det: f64, l_bev: f64, params: &UncertaintyParams) -> (f64, [f64; 3]) {
    let (t, g) = uncertainty_weighted(&[l_seg, l_det, l_bev], &params.as_array()).expect("three and three");
    (t, [g[0], g[1], g[2]])
}

/// Whether uncertainty weights apply per task group or per loss component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightingMode {
    #[default]
    Grouped,
    PerLoss,
}

/// Raw loss components of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub ce_v: f64,
    pub lovasz_v: f64,
    pub hm: f64,
    pub reg: f64,
    pub iou: f64,
    pub ce_bev: f64,
    pub lovasz_bev: f64,
}

impl LossComponents {
    /// Component order used by per-loss weighting.
    pub fn per_loss(&self) -> [f64; 7] {
        [self.ce_v, self.lovasz_v, self.ce_bev, self.lovasz_bev, self.hm, self.reg, self.iou]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLossReport {
    pub components: LossComponents,
    pub seg: f64,
    pub det: f64,
    pub bev: f64,
    pub total: f64,
    pub mode: WeightingMode,
    /// `d total / d s` for each uncertainty parameter of the chosen mode.
    pub grad_log_vars: Vec<f64>,
}

impl TaskLossReport {
    /// Grouped mode takes 3 log-variances, per-loss mode 7.
    pub fn new(components: LossComponents, mode: WeightingMode, log_vars: &[f64]) -> Result<Self> {
        let seg = components.ce_v + components.lovasz_v;
        let det = group_det(components.hm, components.reg, components.iou);
        let bev = components.ce_bev + components.lovasz_bev;
        let (total, grad_log_vars) = match mode {
            WeightingMode::Grouped => uncertainty_weighted(&[seg, det, bev], log_vars)?,
            WeightingMode::PerLoss => uncertainty_weighted(&components.per_loss(), log_vars)?,
        };
        Ok(Self { components, seg, det, bev, total, mode, grad_log_vars })
    }

    /// Flat `key=value` lines.
    pub fn to_kv_text(&self) -> String {
        let c = &self.components;
        let mut s = String::new();
        for (k, v) in [
            ("loss.ce_v", c.ce_v),
            ("loss.lovasz_v", c.lovasz_v),
            ("loss.hm", c.hm),
            ("loss.reg", c.reg),
            ("loss.iou", c.iou),
            ("loss.ce_bev", c.ce_bev),
            ("loss.lovasz_bev", c.lovasz_bev),
            ("loss.seg", self.seg),
            ("loss.det", self.det),
            ("loss.bev", self.bev),
            ("loss.total", self.total),
        ] {
            let _ = writeln!(s, "{k}={v:.9}");
        }
        let _ = writeln!(s, "loss.mode={}", match self.mode {
            WeightingMode::Grouped => "grouped",
            WeightingMode::PerLoss => "per_loss",
        });
        for (i, g) in self.grad_log_vars.iter().enumerate() {
            let _ = writeln!(s, "loss.grad_log_var.{i}={g:.9}");
        }
        s
    }
}
