//! Open-set evaluation: averaged F1 over seen classes, correct reject rate,
//! threshold sweeps, area under the aF1–CRR curve, and distance histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::openset::decision;
use crate::types::ClassId;

/// Ground truth and final attribution of one test sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub label: ClassId,
    pub seen: bool,
    pub final_class: ClassId,
}

/// A test sample scored once: nearest candidate and its normalized distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub label: ClassId,
    pub seen: bool,
    pub candidate: ClassId,
    pub score: f64,
}

impl ScoredSample {
    pub fn outcome(&self, tau: f64) -> Outcome {
        Outcome {
            label: self.label,
            seen: self.seen,
            final_class: decision(self.candidate, self.score, tau).final_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassId>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self, j: usize) -> f64 {
        let den = 2 * self.tp[j] + self.fp[j] + self.fn_[j];
        if den == 0 {
            0.0
        } else {
            (2 * self.tp[j]) as f64 / den as f64
        }
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes.len()).map(|j| self.f1(j)).collect()
    }
}

/// Per seen class: TP counts samples of that class attributed to it; FN
/// counts samples of that class attributed elsewhere or rejected; FP counts
/// any other sample, seen or unseen, attributed to it.
pub fn confusion(outcomes: &[Outcome], classes: &[ClassId]) -> ConfusionCounts {
    let index: BTreeMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = classes.len();
    let mut counts = ConfusionCounts {
        classes: classes.to_vec(),
        tp: vec![0; n],
        fp: vec![0; n],
        fn_: vec![0; n],
    };
    for o in outcomes {
        let truth = if o.seen { index.get(&o.label).copied() } else { None };
        let predicted = index.get(&o.final_class).copied();
        match (truth, predicted) {
            (Some(t), Some(p)) if t == p => counts.tp[t] += 1,
            (t, p) => {
                if let Some(t) = t {
                    counts.fn_[t] += 1;
                }
                if let Some(p) = p {
                    counts.fp[p] += 1;
                }
            }
        }
    }
    counts
}

/// Unweighted mean of per-class F1.
pub fn af1(counts: &ConfusionCounts) -> Result<f64> {
    let n = counts.classes.len();
    if n == 0 {
        return Err(Error::EmptySet("no seen classes".into()));
    }
    Ok(counts.per_class_f1().iter().sum::<f64>() / n as f64)
}

/// Fraction of unseen-class samples rejected as unknown. Seen samples in the
/// list are ignored.
pub fn crr(outcomes: &[Outcome]) -> Result<f64> {
    let (mut n, mut rejected) = (0usize, 0usize);
    for o in outcomes.iter().filter(|o| !o.seen) {
        n += 1;
        rejected += usize::from(o.final_class.is_unknown());
    }
    if n == 0 {
        return Err(Error::EmptySet("no unseen samples".into()));
    }
    Ok(rejected as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub tau: f64,
    pub af1: f64,
    pub crr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffCurve {
    points: Vec<TradeoffPoint>,
    /// aF1 with every candidate accepted (the limit of large tau).
    closed_set_af1: f64,
}

impl TradeoffCurve {
    pub fn new(points: Vec<TradeoffPoint>, closed_set_af1: f64) -> Result<Self> {
        if points.windows(2).any(|w| w[0].tau.partial_cmp(&w[1].tau) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::Curve("taus must be strictly increasing".into()));
        }
        Ok(Self {
            points,
            closed_set_af1,
        })
    }

    pub fn points(&self) -> &[TradeoffPoint] {
        &self.points
    }

    pub fn closed_set_af1(&self) -> f64 {
        self.closed_set_af1
    }

    /// Point maximizing `aF1 + CRR`; the lowest tau wins ties.
    pub fn best_point(&self) -> Option<TradeoffPoint> {
        self.points.iter().copied().fold(None, |best: Option<TradeoffPoint>, p| match best {
            Some(b) if b.af1 + b.crr >= p.af1 + p.crr => Some(b),
            _ => Some(p),
        })
    }

    /// Grid point with the largest tau not above `tau`, if any.
    pub fn point_at(&self, tau: f64) -> Option<TradeoffPoint> {
        self.points.iter().rev().find(|p| p.tau <= tau).copied()
    }
}

/// `n` geometrically spaced values from `min` to `max` inclusive.
pub fn geometric_grid(min: f64, max: f64, n: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && max.is_finite()) || n < 2 {
        return Err(Error::Param(format!("bad grid: min {min}, max {max}, n {n}")));
    }
    let ratio = (max / min).ln() / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|i| min * (ratio * i as f64).exp()).collect();
    g[n - 1] = max;
    Ok(g)
}

/// 200 thresholds from 0.05 to 20.
pub fn default_tau_grid() -> Vec<f64> {
    geometric_grid(0.05, 20.0, 200).expect("valid default grid")
}

/// Thresholds every pre-scored sample at each grid value.
pub fn sweep(scored: &[ScoredSample], classes: &[ClassId], grid: &[f64]) -> Result<TradeoffCurve> {
    if grid.is_empty() {
        return Err(Error::Curve("empty tau grid".into()));
    }
    let at = |tau: f64| -> Result<(f64, f64)> {
        let outcomes: Vec<Outcome> = scored.iter().map(|s| s.outcome(tau)).collect();
        Ok((af1(&confusion(&outcomes, classes))?, crr(&outcomes)?))
    };
    let points = grid
        .par_iter()
        .map(|&tau| at(tau).map(|(af1, crr)| TradeoffPoint { tau, af1, crr }))
        .collect::<Result<Vec<_>>>()?;
    let closed = scored
        .iter()
        .map(|s| Outcome {
            label: s.label,
            seen: s.seen,
            final_class: s.candidate,
        })
        .collect::<Vec<_>>();
    let closed_set_af1 = af1(&confusion(&closed, classes))?;
    TradeoffCurve::new(points, closed_set_af1)
}

/// Trapezoidal area under aF1 as a function of CRR over `[0, 1]`.
///
/// Points are ordered by CRR. When no point sits at CRR 0 the closed-set
/// point `(0, closed_set_af1)` is added; when none sits at CRR 1, `(1, 0)`.
pub fn auc(curve: &TradeoffCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::Curve(format!(
            "need at least 2 points, got {}",
            curve.points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.crr, p.af1)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts[0].0 > 0.0 {
        pts.insert(0, (0.0, curve.closed_set_af1));
    }
    if pts[pts.len() - 1].0 < 1.0 {
        pts.push((1.0, 0.0));
    }
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramRow {
    pub class: ClassId,
    /// Bin `k` covers `[k·width, (k+1)·width)`.
    pub bin: i64,
    pub count: u64,
}

/// Per-class counts of values in half-open bins of `width`, sorted by class
/// then bin. Empty bins are omitted.
pub fn histogram(values: &[(ClassId, f64)], width: f64) -> Result<Vec<HistogramRow>> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::Param(format!("bin width must be positive, got {width}")));
    }
    let mut counts: BTreeMap<(ClassId, i64), u64> = BTreeMap::new();
    for &(class, v) in values {
        if !v.is_finite() {
            return Err(Error::Numeric("histogram value".into()));
        }
        *counts.entry((class, (v / width).floor() as i64)).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|((class, bin), count)| HistogramRow { class, bin, count })
        .collect())
}

/// `tau,af1,crr` rows with a header.
pub fn curve_csv(curve: &TradeoffCurve) -> String {
    let mut s = String::from("tau,af1,crr\n");
    for p in curve.points() {
        let _ = writeln!(s, "{},{},{}", p.tau, p.af1, p.crr);
    }
    s
}

/// Histogram rows labelled with the sample group they came from.
pub fn histogram_csv(groups: &[(&str, &[HistogramRow])], width: f64) -> String {
    let mut s = String::from("set,class,bin_lo,bin_hi,count\n");
    for (name, rows) in groups {
        for r in rows.iter() {
            let _ = writeln!(
                s,
                "{name},{},{},{},{}",
                r.class,
                r.bin as f64 * width,
                (r.bin + 1) as f64 * width,
                r.count
            );
        }
    }
    s
}
