//! Detection scoring: triplet matching, per-class average precision, mAP over
//! (action, object) classes, and AP restricted to scale and distance bins.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{iou, HoiTriplet};
use crate::model::PredictionSet;
use crate::synth::{assign_bins, BinConfig, BinLabels};

pub const IOU_THRESHOLD: f64 = 0.5;

/// One scored triplet. The triplet carries exactly one action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene: usize,
    /// Index of the producing query (or any per-scene id); orders ties.
    pub query: usize,
    pub triplet: HoiTriplet,
    pub score: f64,
}

impl DetectionRecord {
    pub fn action(&self) -> usize {
        self.triplet.actions[0]
    }

    /// `(action, object class)`.
    pub fn class_key(&self) -> (usize, usize) {
        (self.action(), self.triplet.class)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// One detection per query: the most likely action and object class, scored
/// by the product of their probabilities.
pub fn detections(scene: usize, preds: &PredictionSet) -> Vec<DetectionRecord> {
    preds
        .entries
        .iter()
        .enumerate()
        .map(|(q, p)| {
            let (a, c) = (argmax(&p.act), argmax(&p.cls));
            DetectionRecord {
                scene,
                query: q,
                triplet: HoiTriplet {
                    human: p.hbox,
                    object: p.obox,
                    class: c,
                    actions: vec![a],
                },
                score: p.act[a] * p.cls[c],
            }
        })
        .collect()
}

/// Both boxes at IoU ≥ 0.5, same object class, and the detected action among
/// the ground-truth actions.
pub fn triplet_match(det: &DetectionRecord, gt: &HoiTriplet) -> bool {
    det.triplet.class == gt.class
        && gt.actions.contains(&det.action())
        && iou(&det.triplet.human, &gt.human) >= IOU_THRESHOLD
        && iou(&det.triplet.object, &gt.object) >= IOU_THRESHOLD
}

fn match_quality(det: &DetectionRecord, gt: &HoiTriplet) -> f64 {
    iou(&det.triplet.human, &gt.human).min(iou(&det.triplet.object, &gt.object))
}

/// Ground truth of one class, by scene and index within the scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtRef<'a> {
    pub scene: usize,
    pub index: usize,
    pub triplet: &'a HoiTriplet,
}

/// Score descending, then scene, then query.
pub fn rank(dets: &mut [&DetectionRecord]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scene.cmp(&b.scene))
            .then(a.query.cmp(&b.query))
    });
}

/// Greedy matching of ranked detections: each detection takes the unclaimed
/// matching ground truth with the best worse-of-two IoU (ties to the lower
/// position in `gts`). Returns the claimed gt position per detection.
pub fn greedy_match(ranked: &[&DetectionRecord], gts: &[GtRef]) -> Vec<Option<usize>> {
    let mut claimed = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                if claimed[i] || g.scene != d.scene || !triplet_match(d, g.triplet) {
                    continue;
                }
                let q = match_quality(d, g.triplet);
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((i, q));
                }
            }
            best.map(|(i, _)| {
                claimed[i] = true;
                i
            })
        })
        .collect()
}

/// Area under the precision-recall curve with all-points interpolation.
/// `outcomes` holds, in rank order, `Some(true)` for a true positive,
/// `Some(false)` for a false positive and `None` for an ignored detection.
pub fn ap_from_outcomes(outcomes: &[Option<bool>], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for o in outcomes.iter().flatten() {
        if *o {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // Interpolated precision from the right, then the area summed in rank
    // order so the rounding does not depend on the traversal.
    let mut interpolated = vec![0.0f64; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        interpolated[i] = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (&(recall, _), &p) in points.iter().zip(&interpolated) {
        if recall > prev {
            ap += (recall - prev) * p;
            prev = recall;
        }
    }
    ap
}

pub fn average_precision(dets: &[&DetectionRecord], gts: &[GtRef]) -> f64 {
    let mut ranked = dets.to_vec();
    rank(&mut ranked);
    let matched = greedy_match(&ranked, gts);
    let outcomes: Vec<Option<bool>> = matched.iter().map(|m| Some(m.is_some())).collect();
    ap_from_outcomes(&outcomes, gts.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub action: usize,
    pub object: usize,
    pub num_gt: usize,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAp {
    pub category: String,
    pub bin: String,
    pub num_gt: usize,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Classes with at least one ground-truth instance.
    pub classes: Vec<ClassAp>,
    pub map: f64,
    /// Non-empty bins only.
    pub bins: Vec<BinAp>,
}

type ClassKey = (usize, usize);

/// Scores `dets` against per-scene ground truth. With `bins`, also reports
/// mAP restricted to each scale and distance bin.
pub fn evaluate(dets: &[DetectionRecord], gts: &[Vec<HoiTriplet>], bins: Option<&BinConfig>) -> Result<ApReport> {
    if let Some(d) = dets.iter().find(|d| d.scene >= gts.len()) {
        return Err(Error::Argument(format!("detection for scene {} of {}", d.scene, gts.len())));
    }
    if let Some(d) = dets.iter().find(|d| d.triplet.actions.len() != 1 || !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::Argument(format!(
            "detection in scene {} needs one action and a score in [0, 1]",
            d.scene
        )));
    }
    // Ground truth expanded to one entry per (action, object) class.
    let mut flat: Vec<(ClassKey, GtRef)> = Vec::new();
    let mut triplets: Vec<&HoiTriplet> = Vec::new();
    for (scene, list) in gts.iter().enumerate() {
        for (index, t) in list.iter().enumerate() {
            triplets.push(t);
            for &a in &t.actions {
                flat.push(((a, t.class), GtRef { scene, index, triplet: t }));
            }
        }
    }
    let labels: Option<Vec<BinLabels>> = match bins {
        Some(cfg) => Some(assign_bins(&triplets.iter().map(|t| (*t).clone()).collect::<Vec<_>>(), cfg)?),
        None => None,
    };
    // Position of each gt triplet in `triplets`, for bin lookup.
    let mut offsets = Vec::with_capacity(gts.len());
    let mut acc = 0;
    for list in gts {
        offsets.push(acc);
        acc += list.len();
    }

    let mut by_class: BTreeMap<ClassKey, (Vec<&DetectionRecord>, Vec<GtRef>)> = BTreeMap::new();
    for (k, g) in &flat {
        by_class.entry(*k).or_default().1.push(*g);
    }
    for d in dets {
        if let Some(e) = by_class.get_mut(&d.class_key()) {
            e.0.push(d);
        }
    }

    let mut classes = Vec::new();
    // Per bin name: per class (outcomes, in-bin gt count).
    let mut binned: BTreeMap<(&'static str, &'static str), Vec<(Vec<Option<bool>>, usize)>> = BTreeMap::new();
    for (&(action, object), (class_dets, class_gts)) in &by_class {
        let mut ranked = class_dets.clone();
        rank(&mut ranked);
        let matched = greedy_match(&ranked, class_gts);
        let outcomes: Vec<Option<bool>> = matched.iter().map(|m| Some(m.is_some())).collect();
        classes.push(ClassAp {
            action,
            object,
            num_gt: class_gts.len(),
            ap: ap_from_outcomes(&outcomes, class_gts.len()),
        });
        if let Some(labels) = &labels {
            let label_of = |g: &GtRef| labels[offsets[g.scene] + g.index].names();
            let mut names: Vec<(&'static str, &'static str)> = class_gts.iter().flat_map(label_of).collect();
            names.sort();
            names.dedup();
            for name in names {
                let in_bin = |g: &GtRef| label_of(g).contains(&name);
                let num_gt = class_gts.iter().filter(|g| in_bin(g)).count();
                let outcomes = matched
                    .iter()
                    .map(|m| match m {
                        Some(i) if in_bin(&class_gts[*i]) => Some(true),
                        Some(_) => None,
                        None => Some(false),
                    })
                    .collect();
                binned.entry(name).or_default().push((outcomes, num_gt));
            }
        }
    }
    let map = mean(classes.iter().map(|c| c.ap));
    let bins = binned
        .into_iter()
        .map(|((category, bin), per_class)| BinAp {
            category: category.to_string(),
            bin: bin.to_string(),
            num_gt: per_class.iter().map(|p| p.1).sum(),
            map: mean(per_class.iter().map(|(o, n)| ap_from_outcomes(o, *n))),
        })
        .collect();
    Ok(ApReport { classes, map, bins })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Reference AP: enumerates every valid detection-to-gt assignment, keeps
/// the one whose true-positive pattern in rank order is lexicographically
/// largest, and reads precision at every cut-off directly.
pub fn exhaustive_average_precision(dets: &[&DetectionRecord], gts: &[GtRef]) -> f64 {
    let mut ranked = dets.to_vec();
    rank(&mut ranked);
    let options: Vec<Vec<usize>> = ranked
        .iter()
        .map(|d| {
            (0..gts.len())
                .filter(|&i| gts[i].scene == d.scene && triplet_match(d, gts[i].triplet))
                .collect()
        })
        .collect();
    let mut best: Vec<bool> = Vec::new();
    let mut current = Vec::with_capacity(ranked.len());
    let mut used = vec![false; gts.len()];
    fn walk(options: &[Vec<usize>], used: &mut [bool], current: &mut Vec<bool>, best: &mut Vec<bool>) {
        if current.len() == options.len() {
            if best.is_empty() || *current > *best {
                best.clone_from(current);
            }
            return;
        }
        for &g in &options[current.len()] {
            if !used[g] {
                used[g] = true;
                current.push(true);
                walk(options, used, current, best);
                current.pop();
                used[g] = false;
            }
        }
        current.push(false);
        walk(options, used, current, best);
        current.pop();
    }
    walk(&options, &mut used, &mut current, &mut best);
    if gts.is_empty() {
        return 0.0;
    }
    // Interpolated precision at recall r: the best precision at any cut-off
    // reaching recall ≥ r. Sum it over each recall increment.
    let n = best.len();
    let prec_rec: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let tp = best[..k].iter().filter(|&&b| b).count() as f64;
            (tp / k as f64, tp / gts.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        let r = prec_rec[k].1;
        if r > prev_recall {
            let p = prec_rec.iter().filter(|(_, rr)| *rr >= r).map(|(p, _)| *p).fold(0.0, f64::max);
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

pub fn write_detections(path: &Path, dets: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("detections line {}: {e}", i + 1)))?,
            );
        }
    }
    Ok(out)
}

/// `action,object,num_gt,ap` per class and a closing `mAP` row.
pub fn class_csv(report: &ApReport) -> String {
    let mut s = String::from("action,object,num_gt,ap\n");
    for c in &report.classes {
        s.push_str(&format!("{},{},{},{:.6}\n", c.action, c.object, c.num_gt, c.ap));
    }
    let total: usize = report.classes.iter().map(|c| c.num_gt).sum();
    s.push_str(&format!("mAP,,{total},{:.6}\n", report.map));
    s
}

/// `category,bin,num_gt,map` per non-empty bin.
pub fn bin_csv(report: &ApReport) -> String {
    let mut s = String::from("category,bin,num_gt,map\n");
    for b in &report.bins {
        s.push_str(&format!("{},{},{},{:.6}\n", b.category, b.bin, b.num_gt, b.map));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::BoxCxcywh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(h: BoxCxcywh, o: BoxCxcywh) -> HoiTriplet {
        HoiTriplet {
            human: h,
            object: o,
            class: 0,
            actions: vec![0],
        }
    }

    fn det(scene: usize, query: usize, t: &HoiTriplet, score: f64) -> DetectionRecord {
        DetectionRecord {
            scene,
            query,
            triplet: HoiTriplet {
                actions: vec![t.actions[0]],
                ..t.clone()
            },
            score,
        }
    }

    const H: BoxCxcywh = [0.3, 0.3, 0.2, 0.4];
    const O: BoxCxcywh = [0.7, 0.6, 0.2, 0.2];

    #[test]
    fn triplet_match_examples() {
        let g = gt(H, O);
        assert!(triplet_match(&det(0, 0, &g, 1.0), &g));
        // Human width shrunk so IoU = 0.49.
        let mut d = det(0, 0, &g, 1.0);
        d.triplet.human[2] *= 0.49;
        assert!((iou(&d.triplet.human, &g.human) - 0.49).abs() < 1e-12);
        assert!(!triplet_match(&d, &g));
        // Object shifted by w/4 horizontally: inter 0.75, union 1.25, IoU 0.6.
        let mut d = det(0, 0, &g, 1.0);
        d.triplet.object[0] += 0.05;
        assert!((iou(&d.triplet.object, &g.object) - 0.6).abs() < 1e-12);
        assert!(triplet_match(&d, &g));
        let mut d = det(0, 0, &g, 1.0);
        d.triplet.class = 1;
        assert!(!triplet_match(&d, &g));
        let mut d = det(0, 0, &g, 1.0);
        d.triplet.actions = vec![2];
        assert!(!triplet_match(&d, &g));
    }

    fn refs(gts: &[(usize, HoiTriplet)]) -> Vec<GtRef<'_>> {
        gts.iter().map(|(s, t)| GtRef { scene: *s, index: 0, triplet: t }).collect()
    }

    #[test]
    fn ap_examples() {
        let gts = vec![(0, gt(H, O)), (1, gt(H, O))];
        let r = refs(&gts);
        let perfect = [det(0, 0, &gts[0].1, 0.9), det(1, 0, &gts[1].1, 0.8)];
        let p: Vec<&DetectionRecord> = perfect.iter().collect();
        assert_eq!(average_precision(&p, &r), 1.0);
        assert_eq!(average_precision(&[], &r), 0.0);
        // TP, FP, TP: points (1, .5), (.5, .5), (2/3, 1).
        let miss = gt([0.8, 0.2, 0.1, 0.1], O);
        let ranked = [det(0, 0, &gts[0].1, 0.9), det(0, 1, &miss, 0.8), det(1, 0, &gts[1].1, 0.7)];
        let p: Vec<&DetectionRecord> = ranked.iter().collect();
        let ap = average_precision(&p, &r);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(ap_from_outcomes(&[Some(false), Some(true)], 1), 0.5);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![(0, gt(H, O))];
        let r = refs(&gts);
        let two = [det(0, 0, &gts[0].1, 0.9), det(0, 1, &gts[0].1, 0.8)];
        let p: Vec<&DetectionRecord> = two.iter().collect();
        assert_eq!(greedy_match(&{ let mut q = p.clone(); rank(&mut q); q }, &r), vec![Some(0), None]);
        assert_eq!(average_precision(&p, &r), 1.0);
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<HoiTriplet>>, Vec<DetectionRecord>) {
        let scenes = rng.gen_range(1..4);
        let mut gts = Vec::new();
        for _ in 0..scenes {
            let n = rng.gen_range(0..3);
            // Disjoint boxes per pair: pair k lives in its own horizontal strip.
            gts.push(
                (0..n)
                    .map(|k| {
                        let y = 0.15 + 0.4 * k as f64;
                        HoiTriplet {
                            human: [rng.gen_range(0.1..0.3), y, 0.15, 0.2],
                            object: [rng.gen_range(0.6..0.9), y, 0.1, 0.1],
                            class: rng.gen_range(0..2),
                            actions: vec![rng.gen_range(0..2)],
                        }
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let n_det = rng.gen_range(0..=10);
        let mut dets = Vec::new();
        for q in 0..n_det {
            let scene = rng.gen_range(0..scenes);
            let base = if !gts[scene].is_empty() && rng.gen_bool(0.7) {
                gts[scene][rng.gen_range(0..gts[scene].len())].clone()
            } else {
                gt([0.5, 0.5, 0.1, 0.1], [0.5, 0.8, 0.1, 0.1])
            };
            let jitter = |b: BoxCxcywh, rng: &mut ChaCha8Rng| [b[0] + rng.gen_range(-0.05..0.05), b[1], b[2], b[3]];
            let mut t = base.clone();
            t.human = jitter(base.human, rng);
            t.object = jitter(base.object, rng);
            if rng.gen_bool(0.2) {
                t.class = 1 - t.class.min(1);
            }
            // Coarse scores so ties occur.
            dets.push(DetectionRecord {
                scene,
                query: q,
                triplet: t,
                score: rng.gen_range(1..5) as f64 / 4.0,
            });
        }
        (gts, dets)
    }

    #[test]
    fn greedy_ap_matches_exhaustive_checker() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let (gts, dets) = random_case(&mut rng);
            let report = evaluate(&dets, &gts, None).unwrap();
            for c in &report.classes {
                let key = (c.action, c.object);
                let owned: Vec<(usize, usize, &HoiTriplet)> = gts
                    .iter()
                    .enumerate()
                    .flat_map(|(s, l)| l.iter().enumerate().map(move |(i, t)| (s, i, t)))
                    .filter(|(_, _, t)| t.actions.contains(&key.0) && t.class == key.1)
                    .collect();
                let r: Vec<GtRef> = owned.iter().map(|&(scene, index, triplet)| GtRef { scene, index, triplet }).collect();
                let d: Vec<&DetectionRecord> = dets.iter().filter(|d| d.class_key() == key).collect();
                assert_eq!(c.ap, exhaustive_average_precision(&d, &r));
            }
        }
    }

    #[test]
    fn ground_truth_as_detections_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (gts, _) = random_case(&mut rng);
            let dets: Vec<DetectionRecord> = gts
                .iter()
                .enumerate()
                .flat_map(|(s, l)| l.iter().enumerate().map(move |(q, t)| det(s, q, t, 1.0)))
                .collect();
            let report = evaluate(&dets, &gts, None).unwrap();
            if !report.classes.is_empty() {
                assert_eq!(report.map, 1.0);
            }
        }
    }

    #[test]
    fn ap_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (gts, dets) = random_case(&mut rng);
            let base = evaluate(&dets, &gts, None).unwrap();
            for c in &base.classes {
                assert!((0.0..=1.0).contains(&c.ap));
            }
            // Rank invariance.
            let scaled: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord { score: d.score * 0.5, ..d.clone() }).collect();
            assert_eq!(evaluate(&scaled, &gts, None).unwrap(), base);
            // A correct detection above all others never lowers AP.
            // The new detection finds a gt no existing detection matches.
            let unfound = gts.iter().enumerate().find_map(|(s, l)| {
                l.iter().find(|t| !dets.iter().any(|d| d.scene == s && triplet_match(d, t))).map(|t| (s, t))
            });
            if let Some((s, t)) = unfound {
                let mut more = scaled.clone();
                more.push(det(s, 99, t, 1.0));
                let after = evaluate(&more, &gts, None).unwrap();
                let key = (t.actions[0], t.class);
                let ap = |r: &ApReport| r.classes.iter().find(|c| (c.action, c.object) == key).unwrap().ap;
                assert!(ap(&after) >= ap(&base));
            }
        }
    }

    #[test]
    fn binned_examples() {
        // Two gts, one h<o and one h>o, each found once.
        let small_h = gt([0.2, 0.2, 0.05, 0.05], [0.6, 0.6, 0.3, 0.3]);
        let big_h = gt([0.3, 0.5, 0.3, 0.5], [0.8, 0.8, 0.05, 0.05]);
        let gts = vec![vec![small_h.clone()], vec![big_h.clone()]];
        let dets = vec![det(0, 0, &small_h, 0.6), det(1, 0, &big_h, 0.9)];
        let report = evaluate(&dets, &gts, Some(&BinConfig::default())).unwrap();
        let get = |cat: &str, bin: &str| report.bins.iter().find(|b| b.category == cat && b.bin == bin).cloned();
        assert_eq!(get("ratio", "h<o").unwrap().map, 1.0);
        assert_eq!(get("ratio", "h>o").unwrap().map, 1.0);
        assert!(get("ratio", "h=o").is_none());
        // A false positive in one scene lowers only bins that count it.
        let mut dets = dets;
        dets.push(det(0, 1, &gt([0.9, 0.1, 0.05, 0.05], [0.6, 0.6, 0.3, 0.3]), 0.95));
        let report = evaluate(&dets, &gts, Some(&BinConfig::default())).unwrap();
        let b = report.bins.iter().find(|b| b.category == "ratio" && b.bin == "h>o").unwrap();
        assert!(b.map < 1.0);
    }

    #[test]
    fn single_bin_equals_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let everything = BinConfig {
            ratio: (-2.0, -1.0),
            ..BinConfig::default()
        };
        for _ in 0..50 {
            let (gts, dets) = random_case(&mut rng);
            let report = evaluate(&dets, &gts, Some(&everything)).unwrap();
            if report.classes.is_empty() {
                continue;
            }
            let b = report.bins.iter().find(|b| b.category == "ratio").unwrap();
            assert_eq!(b.bin, "h>o");
            assert_eq!(b.map, report.map);
        }
    }

    #[test]
    fn csv_and_detection_files() {
        let g = gt(H, O);
        let gts = vec![vec![g.clone()]];
        let dets = vec![det(0, 0, &g, 0.5)];
        let report = evaluate(&dets, &gts, None).unwrap();
        assert_eq!(class_csv(&report), "action,object,num_gt,ap\n0,0,1,1.000000\nmAP,,1,1.000000\n");
        let path = std::env::temp_dir().join(format!("mstr-dets-{}.jsonl", std::process::id()));
        write_detections(&path, &dets).unwrap();
        assert_eq!(read_detections(&path).unwrap(), dets);
        std::fs::remove_file(&path).unwrap();
        assert!(evaluate(&[det(3, 0, &g, 0.5)], &gts, None).is_err());
    }
}
