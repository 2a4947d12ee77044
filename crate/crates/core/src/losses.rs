//! Training objectives: base map loss, relation, feature and head
//! distillation, and their weighted total.
//!
//! Class logits are `[Q, 3]`; every classification term appends an implicit
//! zero logit as a fourth "no-object" class. Teacher-side inputs are
//! detached before use so no gradient reaches the teacher.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::assignment::{self, Assignment};
use crate::config::{DistillWeights, LossConfig, RelationMode};
use crate::error::{Error, Result};
use crate::map::{ElementClass, Point, NUM_CLASSES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Label index of the implicit no-object class.
pub const NO_OBJECT: usize = NUM_CLASSES;

/// Relative margin by which the reversed point order must be closer.
pub const REVERSAL_MARGIN: f64 = 1e-9;

/// Mean of squared differences.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `softmax_rows(p_a · p_bᵀ / sqrt(d_k))`.
pub fn cross_modal_attention(tape: &mut Tape, p_a: Var, p_b: Var, d_k: f64) -> Result<Var> {
    if !(d_k > 0.0) {
        return Err(Error::Config(format!("attention scale dimension must be positive, got {d_k}")));
    }
    if tape.shape(p_a).len() != 2 || tape.shape(p_a) != tape.shape(p_b) {
        return Err(Error::Shape(format!(
            "attention: patch sequences {:?} and {:?} differ",
            tape.shape(p_a),
            tape.shape(p_b)
        )));
    }
    let bt = tape.transpose2d(p_b)?;
    let scores = tape.matmul(p_a, bt)?;
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(d_k));
    tape.softmax_rows(scaled)
}

/// `KL(t ‖ s)` averaged over rows; `t` is read as a constant.
pub fn kl_rows(tape: &mut Tape, t: Var, s: Var) -> Result<Var> {
    if tape.shape(t) != tape.shape(s) || tape.shape(t).len() != 2 {
        return Err(Error::Shape(format!(
            "relation: attention shapes {:?} and {:?} differ",
            tape.shape(t),
            tape.shape(s)
        )));
    }
    if let Some(bad) = tape.value(s).iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Numeric(format!("relation: student attention entry {bad} is not positive")));
    }
    let rows = tape.shape(t)[0] as f64;
    let entropy: f64 = tape.value(t).iter().map(|&p| if p > 0.0 { p * libm::log(p) } else { 0.0 }).sum();
    let t = tape.detach(t);
    let ln_s = tape.ln(s)?;
    let cross = tape.mul(t, ln_s)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0 / rows);
    Ok(tape.add_scalar(neg, entropy / rows))
}

/// Sum over both attention directions of `KL(teacher ‖ student)`.
pub fn relation_loss(tape: &mut Tape, t_c2l: Var, t_l2c: Var, s_c2l: Var, s_l2c: Var) -> Result<Var> {
    let n = tape.shape(t_c2l).to_vec();
    for v in [t_l2c, s_c2l, s_l2c] {
        if tape.shape(v) != n.as_slice() {
            return Err(Error::Shape(format!("relation: attention shapes {n:?} and {:?} differ", tape.shape(v))));
        }
    }
    let a = kl_rows(tape, t_c2l, s_c2l)?;
    let b = kl_rows(tape, t_l2c, s_l2c)?;
    tape.add(a, b)
}

/// The two attention matrices of one model. `Cross` pairs the two
/// modalities (or subspaces) in both directions, `Uni` attends each within
/// itself, and `Hybrid` keeps the first-to-second cross direction and
/// replaces the other with self-attention of the second.
pub fn relation_pair(tape: &mut Tape, mode: RelationMode, p1: Var, p2: Var, d_k: f64) -> Result<(Var, Var)> {
    let (a, b) = match mode {
        RelationMode::Cross => ((p1, p2), (p2, p1)),
        RelationMode::Uni => ((p1, p1), (p2, p2)),
        RelationMode::Hybrid => ((p1, p2), (p2, p2)),
    };
    let first = cross_modal_attention(tape, a.0, a.1, d_k)?;
    let second = cross_modal_attention(tape, b.0, b.1, d_k)?;
    Ok((first, second))
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureTerms {
    pub l_low: Var,
    pub l_high: Var,
    pub l_feature: Var,
}

pub fn feature_loss(tape: &mut Tape, fused_t: Var, fused_s: Var, high_t: Var, high_s: Var) -> Result<FeatureTerms> {
    let fused_t = tape.detach(fused_t);
    let high_t = tape.detach(high_t);
    let l_low = mse(tape, fused_t, fused_s)?;
    let l_high = mse(tape, high_t, high_s)?;
    let l_feature = tape.add(l_low, l_high)?;
    Ok(FeatureTerms { l_low, l_high, l_feature })
}

/// Class probabilities `[Q, 4]` with the no-object column, as plain values.
pub fn class_probabilities(logits: &[f64], queries: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(queries * (NUM_CLASSES + 1));
    for row in logits.chunks(NUM_CLASSES).take(queries) {
        let mx = row.iter().copied().fold(0.0f64, f64::max);
        let ex: Vec<f64> = row.iter().map(|&l| libm::exp(l - mx)).chain([libm::exp(-mx)]).collect();
        let total: f64 = ex.iter().sum();
        out.extend(ex.into_iter().map(|e| e / total));
    }
    out
}

/// Hard labels: argmax over the three class logits and the zero no-object
/// logit, ties resolved toward the lower index.
pub fn hard_labels(logits: &[f64]) -> Vec<usize> {
    logits
        .chunks(NUM_CLASSES)
        .map(|row| {
            let mut best = (0, row[0]);
            for (j, &l) in row.iter().enumerate().skip(1) {
                if l > best.1 {
                    best = (j, l);
                }
            }
            if 0.0 > best.1 {
                NO_OBJECT
            } else {
                best.0
            }
        })
        .collect()
}

/// Softmax focal loss `-α (1 - p_y)^γ ln p_y` averaged over rows, with
/// `labels[i]` in `0..=3`.
pub fn focal_loss(tape: &mut Tape, logits: Var, labels: &[usize], gamma: f64, alpha: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != NUM_CLASSES || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "focal: logits {shape:?} do not match {} labels over {NUM_CLASSES} classes",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > NO_OBJECT) {
        return Err(Error::Shape(format!("focal: label {bad} out of range")));
    }
    let q = shape[0];
    let zeros = tape.constant(&Tensor::zeros(&[q, 1]));
    let full = tape.concat_cols(logits, zeros)?;
    let logp = tape.log_softmax_rows(full)?;
    let idx = labels.iter().enumerate().map(|(i, &l)| i * (NUM_CLASSES + 1) + l).collect();
    let logp_y = tape.gather(logp, idx, &[q])?;
    let p_y = tape.exp(logp_y);
    let neg = tape.scale(p_y, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let weight = tape.pow_scalar(one_minus, gamma)?;
    let terms = tape.mul(weight, logp_y)?;
    let mean = tape.mean(terms);
    Ok(tape.scale(mean, -alpha))
}

/// Mean over points of `|dx| + |dy|` for two point lists of equal length.
pub fn manhattan_mean(a: &[f64], b: &[f64]) -> f64 {
    let k = (a.len() / 2).max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / k
}

fn reversed(points: &[f64]) -> Vec<f64> {
    points.chunks(2).rev().flat_map(|p| [p[0], p[1]]).collect()
}

fn flat(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

/// Student-to-teacher correspondence for head distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatch {
    /// `student_to_teacher[i]` is the teacher query paired with student query `i`.
    pub student_to_teacher: Vec<usize>,
    /// Teacher hard labels, indexed by teacher query.
    pub teacher_labels: Vec<usize>,
    pub cost: f64,
}

/// Cost of pairing student query `i` with teacher query `j`: the negated
/// student probability of the teacher's hard label, plus the mean Manhattan
/// point distance when that label is an object class.
pub fn head_match_cost(t_cls: &[f64], t_pts: &[f64], s_cls: &[f64], s_pts: &[f64], q: usize) -> (Vec<f64>, Vec<usize>) {
    let labels = hard_labels(t_cls);
    let probs = class_probabilities(s_cls, q);
    let stride = t_pts.len() / q.max(1);
    let mut cost = vec![0.0; q * q];
    for i in 0..q {
        let sp = &s_pts[i * stride..(i + 1) * stride];
        for j in 0..q {
            let mut c = -probs[i * (NUM_CLASSES + 1) + labels[j]];
            if labels[j] != NO_OBJECT {
                c += manhattan_mean(sp, &t_pts[j * stride..(j + 1) * stride]);
            }
            cost[i * q + j] = c;
        }
    }
    (cost, labels)
}

/// Optimal one-to-one pairing of student and teacher queries.
pub fn match_predictions(t_cls: &[f64], t_pts: &[f64], s_cls: &[f64], s_pts: &[f64], queries: usize) -> Result<HeadMatch> {
    if t_cls.len() != s_cls.len() || t_pts.len() != s_pts.len() || t_cls.len() != queries * NUM_CLASSES {
        return Err(Error::Shape(format!(
            "match_predictions: teacher ({}, {}) and student ({}, {}) outputs disagree for {queries} queries",
            t_cls.len(),
            t_pts.len(),
            s_cls.len(),
            s_pts.len()
        )));
    }
    let (cost, teacher_labels) = head_match_cost(t_cls, t_pts, s_cls, s_pts, queries);
    let Assignment { row_to_col, cost } = assignment::solve(&cost, queries, queries)?;
    Ok(HeadMatch { student_to_teacher: row_to_col, teacher_labels, cost })
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTerms {
    pub l_cls: Var,
    pub l_point: Var,
    pub l_head: Var,
}

/// Focal loss against the matched teacher labels plus the Manhattan point
/// loss over pairs whose teacher label is an object class.
pub fn head_loss(tape: &mut Tape, m: &HeadMatch, t_pts: Var, s_cls: Var, s_pts: Var, cfg: &LossConfig) -> Result<HeadTerms> {
    let q = m.student_to_teacher.len();
    let labels: Vec<usize> = m.student_to_teacher.iter().map(|&j| m.teacher_labels[j]).collect();
    let l_cls = focal_loss(tape, s_cls, &labels, cfg.focal_gamma, cfg.focal_alpha)?;

    let pairs: Vec<(usize, usize)> =
        m.student_to_teacher.iter().enumerate().filter(|(_, &j)| m.teacher_labels[j] != NO_OBJECT).map(|(i, &j)| (i, j)).collect();
    let l_point = if pairs.is_empty() {
        tape.constant(&Tensor::scalar(0.0))
    } else {
        let numel: usize = tape.shape(s_pts).iter().product();
        let stride = numel / q;
        let t_flat = tape.reshape(t_pts, &[q, stride])?;
        let t_flat = tape.detach(t_flat);
        let s_flat = tape.reshape(s_pts, &[q, stride])?;
        let si: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ti: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let s_sel = tape.select_rows(s_flat, &si)?;
        let t_sel = tape.select_rows(t_flat, &ti)?;
        let d = tape.sub(s_sel, t_sel)?;
        let d = tape.abs(d);
        let total = tape.sum(d);
        tape.scale(total, 2.0 / (pairs.len() * stride) as f64)
    };
    let l_head = tape.add(l_cls, l_point)?;
    Ok(HeadTerms { l_cls, l_point, l_head })
}

/// Query-to-element assignment used by the map loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMatch {
    /// `gt_to_query[g]` is the query assigned to ground-truth element `g`.
    pub gt_to_query: Vec<usize>,
    /// Whether element `g` is compared in reverse point order.
    pub reversed: Vec<bool>,
    pub cost: f64,
}

/// `[G, Q]` matching cost: weighted negated class probability plus weighted
/// direction-minimised mean Manhattan distance.
pub fn map_match_cost(cls: &[f64], pts: &[f64], gts: &[(ElementClass, Vec<Point>)], q: usize, cfg: &LossConfig) -> (Vec<f64>, Vec<bool>) {
    let probs = class_probabilities(cls, q);
    let stride = pts.len() / q.max(1);
    let mut cost = vec![0.0; gts.len() * q];
    let mut rev = vec![false; gts.len() * q];
    for (g, (class, points)) in gts.iter().enumerate() {
        let fwd = flat(points);
        let bwd = reversed(&fwd);
        for j in 0..q {
            let p = &pts[j * stride..(j + 1) * stride];
            let (df, db) = (manhattan_mean(p, &fwd), manhattan_mean(p, &bwd));
            // L1 distances tie on whole regions; keep the forward order
            // unless reversing is clearly closer, so the choice is stable.
            rev[g * q + j] = db < df - REVERSAL_MARGIN * (1.0 + df);
            cost[g * q + j] = -cfg.map_cls_weight * probs[j * (NUM_CLASSES + 1) + class.id()] + cfg.map_pts_weight * df.min(db);
        }
    }
    (cost, rev)
}

pub fn match_map(cls: &[f64], pts: &[f64], gts: &[(ElementClass, Vec<Point>)], q: usize, cfg: &LossConfig) -> Result<MapMatch> {
    if gts.len() > q {
        return Err(Error::Capacity { queries: q, elements: gts.len() });
    }
    if gts.is_empty() {
        return Ok(MapMatch { gt_to_query: Vec::new(), reversed: Vec::new(), cost: 0.0 });
    }
    let (cost, rev) = map_match_cost(cls, pts, gts, q, cfg);
    let a = assignment::solve(&cost, gts.len(), q)?;
    let reversed = a.row_to_col.iter().enumerate().map(|(g, &j)| rev[g * q + j]).collect();
    Ok(MapMatch { gt_to_query: a.row_to_col, reversed, cost: a.cost })
}

#[derive(Debug, Clone, Copy)]
pub struct MapTerms {
    pub cls: Var,
    pub pts: Var,
    pub dir: Var,
    pub total: Var,
}

/// Base map loss against ground truth resampled to `K` points per element.
pub fn map_loss(tape: &mut Tape, cls: Var, pts: Var, gts: &[(ElementClass, Vec<Point>)], cfg: &LossConfig) -> Result<(MapTerms, MapMatch)> {
    let q = tape.shape(cls)[0];
    let numel: usize = tape.shape(pts).iter().product();
    let stride = numel / q;
    let k = stride / 2;
    if let Some((_, bad)) = gts.iter().find(|(_, p)| p.len() != k) {
        return Err(Error::Shape(format!("map_loss: ground truth has {} points, predictions have {k}", bad.len())));
    }
    let m = match_map(tape.value(cls), tape.value(pts), gts, q, cfg)?;

    let mut labels = vec![NO_OBJECT; q];
    for (g, &j) in m.gt_to_query.iter().enumerate() {
        labels[j] = gts[g].0.id();
    }
    let l_cls = focal_loss(tape, cls, &labels, cfg.focal_gamma, cfg.focal_alpha)?;

    let (l_pts, l_dir) = if gts.is_empty() {
        (tape.constant(&Tensor::scalar(0.0)), tape.constant(&Tensor::scalar(0.0)))
    } else {
        let g = gts.len();
        let mut target = Vec::with_capacity(g * stride);
        for (e, (_, points)) in gts.iter().enumerate() {
            let f = flat(points);
            target.extend(if m.reversed[e] { reversed(&f) } else { f });
        }
        let flat_pred = tape.reshape(pts, &[q, stride])?;
        let sel = tape.select_rows(flat_pred, &m.gt_to_query)?;
        let tgt = tape.constant(&Tensor::new(&[g, stride], target.clone())?);
        let d = tape.sub(sel, tgt)?;
        let d = tape.abs(d);
        let total = tape.sum(d);
        let l_pts = tape.scale(total, 1.0 / (g * k) as f64);

        // Edge vectors of the selected predictions and unit GT edges.
        let edges = g * (k - 1);
        let mut cur = Vec::with_capacity(edges * 2);
        let mut nxt = Vec::with_capacity(edges * 2);
        let mut unit = Vec::with_capacity(edges * 2);
        for e in 0..g {
            for p in 0..k - 1 {
                let base = e * stride + 2 * p;
                cur.extend([base, base + 1]);
                nxt.extend([base + 2, base + 3]);
                let (dx, dy) = (target[base + 2] - target[base], target[base + 3] - target[base + 1]);
                let len = libm::sqrt(dx * dx + dy * dy);
                if len > 0.0 {
                    unit.extend([dx / len, dy / len]);
                } else {
                    unit.extend([0.0, 0.0]);
                }
            }
        }
        let a = tape.gather(sel, cur, &[edges, 2])?;
        let b = tape.gather(sel, nxt, &[edges, 2])?;
        let ev = tape.sub(b, a)?;
        let u = tape.constant(&Tensor::new(&[edges, 2], unit)?);
        let dot = tape.mul(ev, u)?;
        let dot = tape.sum_rows(dot)?;
        let sq = tape.square(ev);
        let sq = tape.sum_rows(sq)?;
        let sq = tape.add_scalar(sq, 1e-12);
        let norm = tape.sqrt(sq)?;
        let cos = tape.div(dot, norm)?;
        let mean_cos = tape.mean(cos);
        let neg = tape.scale(mean_cos, -1.0);
        (l_pts, tape.add_scalar(neg, 1.0))
    };

    let wc = tape.scale(l_cls, cfg.map_cls_weight);
    let wp = tape.scale(l_pts, cfg.map_pts_weight);
    let wd = tape.scale(l_dir, cfg.map_dir_weight);
    let s = tape.add(wc, wp)?;
    let total = tape.add(s, wd)?;
    Ok((MapTerms { cls: l_cls, pts: l_pts, dir: l_dir, total }, m))
}

/// Every loss term recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_map: Var,
    pub l_relation: Var,
    pub feature: FeatureTerms,
    pub head: HeadTerms,
    pub total: Var,
}

/// `l_map + λ1 l_relation + λ2 l_feature + λ3 l_head`.
pub fn total_loss(tape: &mut Tape, l_map: Var, l_relation: Var, feature: FeatureTerms, head: HeadTerms, w: DistillWeights) -> Result<LossTerms> {
    w.validate()?;
    let r = tape.scale(l_relation, w.relation);
    let f = tape.scale(feature.l_feature, w.feature);
    let h = tape.scale(head.l_head, w.head);
    let t = tape.add(l_map, r)?;
    let t = tape.add(t, f)?;
    let total = tape.add(t, h)?;
    Ok(LossTerms { l_map, l_relation, feature, head, total })
}

/// Scalar values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_map: f64,
    pub l_relation: f64,
    pub l_low: f64,
    pub l_high: f64,
    pub l_feature: f64,
    pub l_cls: f64,
    pub l_point: f64,
    pub l_head: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, t: &LossTerms) -> Self {
        let v = |x: Var| tape.value(x)[0];
        Self {
            l_map: v(t.l_map),
            l_relation: v(t.l_relation),
            l_low: v(t.feature.l_low),
            l_high: v(t.feature.l_high),
            l_feature: v(t.feature.l_feature),
            l_cls: v(t.head.l_cls),
            l_point: v(t.head.l_point),
            l_head: v(t.head.l_head),
            total: v(t.total),
        }
    }

    /// A breakdown holding only the map loss.
    pub fn map_only(l_map: f64) -> Self {
        Self { l_map, total: l_map, ..Self::default() }
    }

    /// The weighted total recomputed from the components.
    pub fn weighted(&self, w: DistillWeights) -> f64 {
        self.l_map + w.relation * self.l_relation + w.feature * self.l_feature + w.head * self.l_head
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.l_map += o.l_map;
        self.l_relation += o.l_relation;
        self.l_low += o.l_low;
        self.l_high += o.l_high;
        self.l_feature += o.l_feature;
        self.l_cls += o.l_cls;
        self.l_point += o.l_point;
        self.l_head += o.l_head;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            l_map: self.l_map * c,
            l_relation: self.l_relation * c,
            l_low: self.l_low * c,
            l_high: self.l_high * c,
            l_feature: self.l_feature * c,
            l_cls: self.l_cls * c,
            l_point: self.l_point * c,
            l_head: self.l_head * c,
            total: self.total * c,
        }
    }
}
