//! Semantic mIoU and panoptic PQ / SQ / RQ over per-point labels.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::refine::PanopticLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Points whose ground-truth label is in `ignore` are skipped.
pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize, ignore: &[u32]) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::input(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let k = num_classes;
    let (mut tp, mut fp, mut fn_) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if ignore.contains(&g) {
            continue;
        }
        if p as usize >= k || g as usize >= k {
            return Err(Error::input(format!("label pair ({p}, {g}) at point {i} outside {k} classes")));
        }
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let d = tp[c] + fp[c] + fn_[c];
            (d > 0).then(|| tp[c] as f64 / d as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(MiouReport { per_class, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassPq {
    pub class: u32,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl ClassPq {
    fn finish(mut self) -> Self {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom > 0.0 {
            self.pq = self.iou_sum / denom;
            self.rq = self.tp as f64 / denom;
        }
        if self.tp > 0 {
            self.sq = self.iou_sum / self.tp as f64;
        }
        self
    }

    pub fn is_counted(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: Vec<ClassPq>,
}

/// `(class, instance)`; stuff segments use instance 0.
type Segment = (u32, u32);

/// Segment id per point for one labeling: thing points with a nonzero
/// instance form `(class, instance)` segments, each stuff class is one segment.
fn segments(l: &PanopticLabel, things: &[u32], stuff: &[u32]) -> Vec<Option<Segment>> {
    l.semantic
        .iter()
        .zip(&l.instance)
        .map(|(&s, &i)| {
            if things.contains(&s) {
                (i > 0).then_some((s, i))
            } else if stuff.contains(&s) {
                Some((s, 0))
            } else {
                None
            }
        })
        .collect()
}

/// Panoptic quality with matching at IoU > 0.5. Points whose ground-truth
/// class is in neither list are void and skipped. Overall values are means
/// over classes that have at least one segment.
pub fn pq(pred: &PanopticLabel, gt: &PanopticLabel, things: &[u32], stuff: &[u32]) -> Result<PqReport> {
    pred.validate()?;
    gt.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::input(format!("{} predicted points, {} ground-truth points", pred.len(), gt.len())));
    }
    if let Some(c) = things.iter().find(|c| stuff.contains(c)) {
        return Err(Error::config(format!("class {c} listed as both thing and stuff")));
    }
    let valid: Vec<bool> = gt.semantic.iter().map(|s| things.contains(s) || stuff.contains(s)).collect();
    let ps = segments(pred, things, stuff);
    let gs = segments(gt, things, stuff);
    let mut area_p: HashMap<Segment, usize> = HashMap::new();
    let mut area_g: HashMap<Segment, usize> = HashMap::new();
    let mut inter: HashMap<(Segment, Segment), usize> = HashMap::new();
    for i in 0..ps.len() {
        if !valid[i] {
            continue;
        }
        if let Some(p) = ps[i] {
            *area_p.entry(p).or_default() += 1;
        }
        if let Some(g) = gs[i] {
            *area_g.entry(g).or_default() += 1;
            if let Some(p) = ps[i] {
                if p.0 == g.0 {
                    *inter.entry((p, g)).or_default() += 1;
                }
            }
        }
    }
    let mut stats: BTreeMap<u32, ClassPq> = things
        .iter()
        .chain(stuff)
        .map(|&c| (c, ClassPq { class: c, ..Default::default() }))
        .collect();
    let mut matched_p = std::collections::HashSet::new();
    let mut matched_g = std::collections::HashSet::new();
    let mut pairs: Vec<_> = inter.into_iter().collect();
    pairs.sort_unstable();
    for ((p, g), n) in pairs {
        let union = area_p[&p] + area_g[&g] - n;
        let iou = n as f64 / union as f64;
        if iou > 0.5 {
            matched_p.insert(p);
            matched_g.insert(g);
            let s = stats.get_mut(&p.0).expect("class listed");
            s.tp += 1;
            s.iou_sum += iou;
        }
    }
    for p in area_p.keys().filter(|p| !matched_p.contains(*p)) {
        stats.get_mut(&p.0).expect("class listed").fp += 1;
    }
    for g in area_g.keys().filter(|g| !matched_g.contains(*g)) {
        stats.get_mut(&g.0).expect("class listed").fn_ += 1;
    }
    let per_class: Vec<ClassPq> = stats.into_values().map(ClassPq::finish).collect();
    let counted: Vec<&ClassPq> = per_class.iter().filter(|c| c.is_counted()).collect();
    let mean = |f: fn(&ClassPq) -> f64| {
        if counted.is_empty() {
            0.0
        } else {
            counted.iter().map(|c| f(c)).sum::<f64>() / counted.len() as f64
        }
    };
    Ok(PqReport { pq: mean(|c| c.pq), sq: mean(|c| c.sq), rq: mean(|c| c.rq), per_class })
}

/// Flat `key=value` lines for both reports.
pub fn metrics_kv_text(m: &MiouReport, p: Option<&PqReport>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "miou={:.6}", m.mean);
    for (c, v) in m.per_class.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(s, "iou.{c}={v:.6}");
        }
    }
    if let Some(p) = p {
        let _ = writeln!(s, "pq={:.6}\nsq={:.6}\nrq={:.6}", p.pq, p.sq, p.rq);
        for c in p.per_class.iter().filter(|c| c.is_counted()) {
            let _ = writeln!(s, "pq.{}={:.6}", c.class, c.pq);
        }
    }
    s
}
