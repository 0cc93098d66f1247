//! Set matching between predictions and ground truth, and the training loss.
//!
//! Ground truth is padded with empty (∅) rows up to the number of queries.
//! The cost matrix is indexed `[gt row][prediction]`; an [`Assignment`] maps
//! each row to the prediction it claims.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, LayerOutputs, PredictionSet};
use crate::numerics::{Graph, Tensor, Var};

/// Boxes are `(cx, cy, w, h)` in normalized image coordinates.
pub type BoxCxcywh = [f64; 4];

/// Floor for areas in IoU and gIoU denominators.
pub const AREA_EPS: f64 = 1e-7;

pub fn corners(b: &BoxCxcywh) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

pub fn area(b: &BoxCxcywh) -> f64 {
    b[2].max(0.0) * b[3].max(0.0)
}

fn intersection_union(a: &BoxCxcywh, b: &BoxCxcywh) -> (f64, f64) {
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

pub fn iou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (inter, union) = intersection_union(a, b);
    inter / union.max(AREA_EPS)
}

/// IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    let (inter, union) = intersection_union(a, b);
    let (p, q) = (corners(a), corners(b));
    let hull = (p[2].max(q[2]) - p[0].min(q[0])) * (p[3].max(q[3]) - p[1].min(q[1]));
    let hull = hull.max(AREA_EPS);
    inter / union.max(AREA_EPS) - (hull - union) / hull
}

/// One human–object interaction: boxes, object class and the set of actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet {
    pub human: BoxCxcywh,
    pub object: BoxCxcywh,
    /// 0-based object class.
    pub class: usize,
    /// Sorted 0-based action ids.
    pub actions: Vec<usize>,
}

impl HoiTriplet {
    pub fn validate(&self, num_classes: usize, num_actions: usize) -> Result<()> {
        let in_unit = |b: &BoxCxcywh| b.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.human) || !in_unit(&self.object) {
            return Err(Error::Argument("box coordinates outside [0, 1]".into()));
        }
        if self.class >= num_classes {
            return Err(Error::Argument(format!("object class {} of {num_classes}", self.class)));
        }
        if self.actions.iter().any(|&a| a >= num_actions) {
            return Err(Error::Argument(format!("action id out of range for {num_actions} actions")));
        }
        Ok(())
    }

    pub fn action_targets(&self, num_actions: usize) -> Vec<f64> {
        let mut t = vec![0.0; num_actions];
        for &a in &self.actions {
            t[a] = 1.0;
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub act: f64,
    /// Class-loss weight for predictions matched to ∅.
    pub empty_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            cls: 1.0,
            act: 1.0,
            empty_cls: 0.1,
        }
    }
}

fn bce_prob(target: f64, p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn l1(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Cost of assigning `pred` to `gt`; mirrors the loss terms with `1 − p(class)`
/// in place of the class cross-entropy.
pub fn match_cost(gt: &HoiTriplet, pred: &crate::model::Prediction, w: &LossWeights) -> f64 {
    let loc = l1(&gt.human, &pred.hbox) + l1(&gt.object, &pred.obox);
    let overlap = 2.0 - giou(&gt.human, &pred.hbox) - giou(&gt.object, &pred.obox);
    let cls = 1.0 - pred.cls[gt.class];
    let targets = gt.action_targets(pred.act.len());
    let act: f64 = targets.iter().zip(&pred.act).map(|(&t, &p)| bce_prob(t, p)).sum();
    w.l1 * loc + w.giou * overlap + w.cls * cls + w.act * act
}

/// Square `[K][K]` cost matrix, `K = preds.len()`; ∅ rows cost zero.
pub fn cost_matrix(gts: &[HoiTriplet], preds: &PredictionSet, w: &LossWeights) -> Result<Vec<Vec<f64>>> {
    let k = preds.entries.len();
    if gts.len() > k {
        return Err(Error::Argument(format!("{} ground-truth triplets for {k} queries", gts.len())));
    }
    let mut c = vec![vec![0.0; k]; k];
    for (row, gt) in c.iter_mut().zip(gts) {
        for (cell, p) in row.iter_mut().zip(&preds.entries) {
            *cell = match_cost(gt, p, w);
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `perm[row]` is the column assigned to `row`.
    pub perm: Vec<usize>,
    pub cost: f64,
}

fn check_square(c: &[Vec<f64>]) -> Result<usize> {
    let k = c.len();
    if c.iter().any(|r| r.len() != k) {
        return Err(Error::Argument("cost matrix is not square".into()));
    }
    if c.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Argument("cost matrix contains NaN".into()));
    }
    if c.iter().flatten().any(|v| v.is_infinite()) {
        return Err(Error::Argument("cost matrix contains an infinite entry".into()));
    }
    Ok(k)
}

fn total_cost(c: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| c[i][j]).sum()
}

/// Minimum-cost assignment by the O(K³) shortest-augmenting-path method with
/// dual potentials. Among optimal assignments the lexicographically smallest
/// permutation is returned.
pub fn hungarian_match(c: &[Vec<f64>]) -> Result<Assignment> {
    let k = check_square(c)?;
    if k == 0 {
        return Ok(Assignment {
            perm: Vec::new(),
            cost: 0.0,
        });
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = c[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; k];
    for j in 1..=k {
        perm[owner[j] - 1] = j - 1;
    }
    let cost = total_cost(c, &perm);

    // Optimal assignments are the perfect matchings on zero-reduced-cost edges.
    let scale = c.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| c[i][j] - u[i + 1] - v[j + 1] <= tol;
    let refined = lexicographic_refine(k, &perm, tight);
    let refined_cost = total_cost(c, &refined);
    Ok(if refined_cost <= cost {
        Assignment {
            perm: refined,
            cost: refined_cost,
        }
    } else {
        Assignment { perm, cost }
    })
}

/// Rewires a perfect matching on the `tight` edge set into the
/// lexicographically smallest one.
fn lexicographic_refine(k: usize, perm: &[usize], tight: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut perm = perm.to_vec();
    let mut owner = vec![0; k];
    for (i, &j) in perm.iter().enumerate() {
        owner[j] = i;
    }
    let mut locked = vec![false; k];
    for i in 0..k {
        for j in 0..perm[i] {
            if locked[j] || !tight(i, j) {
                continue;
            }
            // Row owner[j] must move; look for an alternating path from it to
            // the column i gives up, through unlocked rows other than i.
            let target = perm[i];
            let start = owner[j];
            let mut seen = vec![false; k];
            seen[j] = true;
            let mut parent: Vec<Option<(usize, usize)>> = vec![None; k];
            let mut stack = vec![start];
            let mut found = false;
            'search: while let Some(r) = stack.pop() {
                for col in 0..k {
                    if seen[col] || locked[col] || !tight(r, col) {
                        continue;
                    }
                    seen[col] = true;
                    parent[col] = Some((r, perm[r]));
                    if col == target {
                        found = true;
                        break 'search;
                    }
                    stack.push(owner[col]);
                }
            }
            if !found {
                continue;
            }
            let mut col = target;
            while let Some((r, prev)) = parent[col] {
                perm[r] = col;
                owner[col] = r;
                if r == start {
                    break;
                }
                col = prev;
            }
            perm[i] = j;
            owner[j] = i;
            break;
        }
        locked[perm[i]] = true;
    }
    perm
}

/// Exhaustive search over all permutations in lexicographic order; the first
/// minimum wins. Reference for [`hungarian_match`].
pub fn brute_force_match(c: &[Vec<f64>]) -> Result<Assignment> {
    let k = check_square(c)?;
    let mut best = Assignment {
        perm: (0..k).collect(),
        cost: f64::INFINITY,
    };
    let mut perm = Vec::with_capacity(k);
    let mut used = vec![false; k];
    fn walk(c: &[Vec<f64>], perm: &mut Vec<usize>, used: &mut [bool], best: &mut Assignment) {
        let k = c.len();
        if perm.len() == k {
            let cost = total_cost(c, perm);
            if cost < best.cost {
                best.cost = cost;
                best.perm.clone_from(perm);
            }
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                walk(c, perm, used, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    walk(c, &mut perm, &mut used, &mut best);
    if k == 0 {
        best.cost = 0.0;
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub loc: T,
    pub cls: T,
    pub act: T,
    pub total: T,
}

impl LossTerms<Var> {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        LossTerms {
            loc: g.data(self.loc)[0],
            cls: g.data(self.cls)[0],
            act: g.data(self.act)[0],
            total: g.data(self.total)[0],
        }
    }
}

/// Differentiable gIoU per row between `pred` (a graph node) and fixed targets.
pub fn giou_rows(g: &mut Graph, pred: Var, targets: &[BoxCxcywh]) -> Result<Var> {
    let n = targets.len();
    let tc: Vec<[f64; 4]> = targets.iter().map(corners).collect();
    let t_lo = g.constant(Tensor::new(&[n, 2], tc.iter().flat_map(|b| [b[0], b[1]]).collect())?);
    let t_hi = g.constant(Tensor::new(&[n, 2], tc.iter().flat_map(|b| [b[2], b[3]]).collect())?);
    let t_area = g.constant(Tensor::new(&[n, 1], targets.iter().map(area).collect())?);
    let floor = g.constant(Tensor::full(&[n, 1], AREA_EPS));

    let center = g.slice_cols(pred, 0, 2)?;
    let size = g.slice_cols(pred, 2, 2)?;
    let half = g.scale(size, 0.5);
    let p_lo = g.sub(center, half)?;
    let p_hi = g.add(center, half)?;
    let cols_product = |g: &mut Graph, x: Var| -> Result<Var> {
        let a = g.slice_cols(x, 0, 1)?;
        let b = g.slice_cols(x, 1, 1)?;
        g.mul(a, b)
    };
    let p_area = cols_product(g, size)?;

    let lo = g.maximum(p_lo, t_lo)?;
    let hi = g.minimum(p_hi, t_hi)?;
    let span = g.sub(hi, lo)?;
    let span = g.relu(span);
    let inter = cols_product(g, span)?;
    let areas = g.add(p_area, t_area)?;
    let union = g.sub(areas, inter)?;
    let union_f = g.maximum(union, floor)?;
    let iou = g.div(inter, union_f)?;

    let h_lo = g.minimum(p_lo, t_lo)?;
    let h_hi = g.maximum(p_hi, t_hi)?;
    let h_span = g.sub(h_hi, h_lo)?;
    let hull = cols_product(g, h_span)?;
    let hull = g.maximum(hull, floor)?;
    let excess = g.sub(hull, union)?;
    let frac = g.div(excess, hull)?;
    g.sub(iou, frac)
}

fn check_assignment(a: &Assignment, k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if a.perm.len() != k || a.perm.iter().any(|&j| j >= k || std::mem::replace(&mut seen[j], true)) {
        return Err(Error::Argument(format!("assignment {:?} is not a permutation of {k}", a.perm)));
    }
    Ok(())
}

/// Localization, classification and action losses of one layer under a fixed
/// assignment. Gradients flow into the layer outputs only.
pub fn compute_losses(
    g: &mut Graph,
    out: &LayerOutputs,
    gts: &[HoiTriplet],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<LossTerms<Var>> {
    let k = g.shape(out.hbox)[0];
    let (nc, na) = (g.shape(out.cls_logits)[1], g.shape(out.act_logits)[1]);
    if gts.len() > k {
        return Err(Error::Argument(format!("{} ground-truth triplets for {k} queries", gts.len())));
    }
    check_assignment(assignment, k)?;
    for gt in gts {
        gt.validate(nc, na)?;
    }
    let matched: Vec<usize> = assignment.perm[..gts.len()].to_vec();

    let mut cls_t = vec![0.0; k * nc];
    let mut cls_w = vec![w.empty_cls * w.cls; k * nc];
    for (gt, &q) in gts.iter().zip(&matched) {
        cls_t[q * nc + gt.class] = 1.0;
        cls_w[q * nc..(q + 1) * nc].fill(w.cls);
    }
    let cls = g.bce_with_logits(out.cls_logits, cls_t, cls_w)?;

    if gts.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        let total = g.add(zero, cls)?;
        return Ok(LossTerms {
            loc: zero,
            cls,
            act: zero,
            total,
        });
    }

    let mut act_t = vec![0.0; k * na];
    let mut act_w = vec![0.0; k * na];
    for (gt, &q) in gts.iter().zip(&matched) {
        act_t[q * na..(q + 1) * na].copy_from_slice(&gt.action_targets(na));
        act_w[q * na..(q + 1) * na].fill(w.act);
    }
    let act = g.bce_with_logits(out.act_logits, act_t, act_w)?;

    let mut terms = Vec::with_capacity(4);
    for (boxes, targets) in [
        (out.hbox, gts.iter().map(|t| t.human).collect::<Vec<_>>()),
        (out.obox, gts.iter().map(|t| t.object).collect::<Vec<_>>()),
    ] {
        let idx: Vec<usize> = matched.iter().flat_map(|&q| 4 * q..4 * q + 4).collect();
        let picked = g.gather(boxes, idx, &[gts.len(), 4])?;
        let tgt = g.constant(Tensor::new(&[gts.len(), 4], targets.iter().flatten().copied().collect())?);
        let diff = g.sub(picked, tgt)?;
        let abs = g.abs(diff);
        let l1 = g.sum(abs);
        terms.push(g.scale(l1, w.l1));
        let gi = giou_rows(g, picked, &targets)?;
        let s = g.sum(gi);
        // Σ (1 − giou) = n − Σ giou
        let neg = g.scale(s, -w.giou);
        terms.push(g.offset(neg, w.giou * gts.len() as f64));
    }
    let loc = g.add_all(&terms)?;
    let total = g.add_all(&[loc, cls, act])?;
    Ok(LossTerms { loc, cls, act, total })
}

/// Matches every decoder layer independently and sums their losses with unit
/// weight. Returns the summed loss node and the per-layer components
/// (the last entry is the final layer).
pub fn set_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    gts: &[HoiTriplet],
    w: &LossWeights,
) -> Result<(Var, Vec<LossTerms<f64>>)> {
    let mut totals = Vec::with_capacity(out.layers.len());
    let mut parts = Vec::with_capacity(out.layers.len());
    for layer in &out.layers {
        let preds = crate::model::read_predictions(g, layer, out.refs_h, out.refs_o);
        let a = hungarian_match(&cost_matrix(gts, &preds, w)?)?;
        let terms = compute_losses(g, layer, gts, &a, w)?;
        parts.push(terms.values(g));
        totals.push(terms.total);
    }
    Ok((g.add_all(&totals)?, parts))
}
