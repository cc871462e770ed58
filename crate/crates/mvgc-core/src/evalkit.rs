//! Detection evaluation: 7-DoF boxes, a simplified center-distance matcher,
//! the NDS-style aggregate and closed-gap scores, and the global ground-truth
//! yaw augmentation.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is in the build graph
use crate::scalar::FloatExt;

const PI: f64 = core::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalError {
    /// Metric component outside its admissible range.
    OutOfRange,
    /// Closed gap with oracle == direct transfer.
    DegenerateBaseline,
    InvalidBox,
    InvalidConfig,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EvalError::OutOfRange => "metric component out of range",
            EvalError::DegenerateBaseline => "oracle and direct-transfer scores coincide",
            EvalError::InvalidBox => "box sizes must be positive",
            EvalError::InvalidConfig => "thresholds must be positive and ascending",
        };
        f.write_str(s)
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid_f(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// 7-parameter box in the ego frame: center, size, heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    /// Detection confidence; 1.0 for ground truths.
    pub score: f64,
    pub class: String,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Box3D, EvalError> {
        if size.iter().any(|s| !(*s > 0.0)) {
            return Err(EvalError::InvalidBox);
        }
        Ok(Box3D {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: wrap_angle(yaw),
            score: 1.0,
            class: String::from("car"),
        })
    }

    pub fn with_score(mut self, score: f64) -> Box3D {
        self.score = score;
        self
    }

    /// Planar (x, y) center distance.
    pub fn center_distance(&self, other: &Box3D) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

/// The (mAP, mATE, mASE, mAOE, NDS) quintuple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricBundle {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Boxes with |x| or |y| beyond this are excluded, meters.
    pub range_limit: f64,
    /// Center-distance match thresholds, meters, ascending.
    pub thresholds: Vec<f64>,
    pub class: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            range_limit: 50.0,
            thresholds: alloc::vec![0.5, 1.0, 2.0, 4.0],
            class: String::from("car"),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let ok = !self.thresholds.is_empty()
            && self.thresholds.windows(2).all(|w| w[0] < w[1])
            && self.thresholds.iter().all(|t| *t > 0.0)
            && self.range_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidConfig)
        }
    }
}

/// Aggregate score: `(3 mAP + sum over errors of (1 - min(1, err))) / 6`.
pub fn nds_star(map: f64, mate: f64, mase: f64, maoe: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&map) || mate < 0.0 || mase < 0.0 || maoe < 0.0 {
        return Err(EvalError::OutOfRange);
    }
    let tp_term: f64 = [mate, mase, maoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    Ok((3.0 * map + tp_term) / 6.0)
}

/// Fraction of the oracle-vs-direct-transfer gap recovered, in percent.
/// May be negative or exceed 100.
pub fn closed_gap(model_nds: f64, dt_nds: f64, oracle_nds: f64) -> Result<f64, EvalError> {
    let denom = oracle_nds - dt_nds;
    if denom == 0.0 {
        return Err(EvalError::DegenerateBaseline);
    }
    Ok((model_nds - dt_nds) / denom * 100.0)
}

/// Greedy center-distance matching and the derived metric bundle.
///
/// AP per threshold is the 101-point interpolated area under the
/// precision-recall curve; mAP averages over thresholds. The true-positive
/// errors (mATE, mASE, mAOE) are means over matches at the largest
/// threshold; mAOE is the absolute wrapped yaw difference normalized by pi.
/// With no ground truths or no matches the errors default to 1.
pub fn match_and_score(preds: &[Box3D], gts: &[Box3D], cfg: &EvalConfig) -> Result<MetricBundle, EvalError> {
    cfg.validate()?;
    let in_range =
        |b: &&Box3D| b.cx.abs() <= cfg.range_limit && b.cy.abs() <= cfg.range_limit;
    let gts: Vec<&Box3D> = gts.iter().filter(in_range).collect();
    let mut preds: Vec<&Box3D> = preds.iter().filter(in_range).collect();
    // Score-descending order with a total tie-break so the result does not
    // depend on input order.
    preds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| box_lex_key(a).partial_cmp(&box_lex_key(b)).unwrap_or(core::cmp::Ordering::Equal))
    });

    let mut ap_sum = 0.0;
    let mut errs = (1.0, 1.0, 1.0);
    for (ti, thr) in cfg.thresholds.iter().enumerate() {
        let (ap, matches) = ap_at_threshold(&preds, &gts, *thr);
        ap_sum += ap;
        if ti + 1 == cfg.thresholds.len() && !matches.is_empty() {
            let n = matches.len() as f64;
            let mate = matches.iter().map(|(p, g)| p.center_distance(g)).sum::<f64>() / n;
            let mase = matches
                .iter()
                .map(|(p, g)| 1.0 - aligned_size_iou(p, g))
                .sum::<f64>()
                / n;
            let maoe = matches
                .iter()
                .map(|(p, g)| wrap_angle(p.yaw - g.yaw).abs() / PI)
                .sum::<f64>()
                / n;
            errs = (mate, mase, maoe);
        }
    }
    let map = ap_sum / cfg.thresholds.len() as f64;
    let (mate, mase, maoe) = errs;
    let nds = nds_star(map, mate, mase, maoe)?;
    Ok(MetricBundle { map, mate, mase, maoe, nds })
}

fn box_lex_key(b: &Box3D) -> [f64; 7] {
    [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw]
}

/// Size similarity of yaw-aligned, center-aligned boxes (3D IoU of the
/// size triples).
fn aligned_size_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.l.min(b.l) * a.w.min(b.w) * a.h.min(b.h);
    let union = a.l * a.w * a.h + b.l * b.w * b.h - inter;
    inter / union
}

fn ap_at_threshold<'a>(
    preds: &[&'a Box3D],
    gts: &[&'a Box3D],
    thr: f64,
) -> (f64, Vec<(&'a Box3D, &'a Box3D)>) {
    if gts.is_empty() || preds.is_empty() {
        return (0.0, Vec::new());
    }
    let mut taken = alloc::vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    let mut matches = Vec::new();
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let d = p.center_distance(g);
            if d <= thr && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp_flags.push(true);
            matches.push((*p, gts[gi]));
        } else {
            tp_flags.push(false);
        }
    }
    // Precision-recall curve over the score-ordered prediction list.
    let npos = gts.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for is_tp in &tp_flags {
        if *is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        pr.push((tp / npos, tp / (tp + fp)));
    }
    // 101-point interpolation: max precision at recall >= r.
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    (ap / 101.0, matches)
}

/// Rotates every box about the ego vertical axis by `alpha` (center and
/// heading together).
pub fn extrinsic_augment(gts: &[Box3D], alpha: f64) -> Vec<Box3D> {
    let (s, c) = (alpha.sin(), alpha.cos());
    gts.iter()
        .map(|g| {
            let mut out = g.clone();
            out.cx = c * g.cx - s * g.cy;
            out.cy = s * g.cx + c * g.cy;
            out.yaw = wrap_angle(g.yaw + alpha);
            out
        })
        .collect()
}

/// Seeded variant sampling the rotation uniformly from `[-band, band]`.
pub fn extrinsic_augment_seeded(gts: &[Box3D], band: f64, seed: u64) -> (Vec<Box3D>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = if band > 0.0 { rng.gen_range(-band..band) } else { 0.0 };
    (extrinsic_augment(gts, alpha), alpha)
}

/// Default sampling band for the augmentation angle: the full circle.
pub const AUGMENT_BAND_DEFAULT: f64 = PI;
