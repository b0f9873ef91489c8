//! Chamfer-matched average precision over map elements.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{geometry, invalid, Result};
use crate::geom::{dist, BevRange, ClassId, Point, Scene, NUM_CLASSES};
use crate::io::Record;

/// Chamfer threshold sets in metres.
pub const MAP1_THRESHOLDS: [f64; 3] = [0.2, 0.5, 1.0];
pub const MAP2_THRESHOLDS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Predictions below this confidence are ignored.
    pub confidence_floor: f64,
    pub interp_points: usize,
}

impl EvalConfig {
    pub fn map1() -> Self {
        Self {
            thresholds: MAP1_THRESHOLDS.to_vec(),
            confidence_floor: 0.0,
            interp_points: 101,
        }
    }

    pub fn map2() -> Self {
        Self {
            thresholds: MAP2_THRESHOLDS.to_vec(),
            ..Self::map1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if self.thresholds.is_empty() || !increasing || self.thresholds[0] <= 0.0 {
            return Err(invalid(format!("thresholds must be positive and increasing: {:?}", self.thresholds)));
        }
        if self.interp_points < 2 {
            return Err(invalid("interpolation needs at least two recall points"));
        }
        Ok(())
    }
}

/// `0.5 (mean_p min_g |p - g| + mean_g min_p |p - g|)`.
pub fn chamfer(p: &[Point], g: &[Point]) -> Result<f64> {
    if p.is_empty() || g.is_empty() {
        return Err(geometry("chamfer distance of an empty point set"));
    }
    let one_way = |a: &[Point], b: &[Point]| {
        a.iter()
            .map(|&x| b.iter().map(|&y| dist(x, y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(0.5 * (one_way(p, g) + one_way(g, p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredElement {
    pub class: ClassId,
    pub closed: bool,
    /// Metric BEV coordinates.
    pub points: Vec<Point>,
    pub confidence: f64,
    /// Foreground class probabilities.
    pub class_scores: [f64; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredScene {
    pub id: String,
    pub bev_range: BevRange,
    pub elements: Vec<PredElement>,
}

impl Record for PredScene {
    fn check(&self) -> std::result::Result<(), String> {
        self.bev_range.validate().map_err(|e| e.to_string())?;
        for (k, el) in self.elements.iter().enumerate() {
            if el.points.is_empty() || el.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(format!("element {k} needs finite points"));
            }
            if !(0.0..=1.0).contains(&el.confidence) {
                return Err(format!("element {k} confidence {} outside [0, 1]", el.confidence));
            }
        }
        Ok(())
    }
}

impl PredScene {
    /// Ground truth restated as certain predictions.
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            id: scene.id.clone(),
            bev_range: scene.bev_range,
            elements: scene
                .elements
                .iter()
                .map(|e| {
                    let mut scores = [0.0; NUM_CLASSES];
                    scores[e.class.index()] = 1.0;
                    PredElement {
                        class: e.class,
                        closed: e.closed,
                        points: e.points.clone(),
                        confidence: 1.0,
                        class_scores: scores,
                    }
                })
                .collect(),
        }
    }
}

/// Precision/recall after each ranked prediction of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
}

/// Area under the interpolated curve sampled at `points` evenly spaced
/// recalls. A class without targets scores 1 when it also has no
/// predictions and 0 otherwise.
pub fn interpolated_ap(c: &PrCurve, points: usize) -> f64 {
    if c.num_gt == 0 {
        return if c.num_pred == 0 { 1.0 } else { 0.0 };
    }
    let mut best_after = c.precision.clone();
    for i in (0..best_after.len().saturating_sub(1)).rev() {
        best_after[i] = best_after[i].max(best_after[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for s in 0..points {
        let r = s as f64 / (points - 1) as f64;
        while k < c.recall.len() && c.recall[k] < r - 1e-12 {
            k += 1;
        }
        if k < c.recall.len() {
            sum += best_after[k];
        }
    }
    sum / points as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub thresholds: Vec<f64>,
    /// `[class][threshold]`.
    pub per_threshold: Vec<Vec<f64>>,
    pub per_class: [f64; NUM_CLASSES],
    pub map: f64,
}

/// Chamfer distances from every prediction of one class in a scene to
/// every target of that class, `[pred][gt]`.
struct SceneClass {
    scene: usize,
    preds: Vec<(usize, f64)>,
    dists: Vec<Vec<f64>>,
    num_gt: usize,
}

fn scene_tables(preds: &[PredScene], gts: &[Scene], floor: f64) -> Result<Vec<[SceneClass; NUM_CLASSES]>> {
    let by_id: HashMap<&str, usize> = preds.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    if by_id.len() != preds.len() {
        return Err(invalid("duplicate scene id in predictions"));
    }
    let gt_ids: HashMap<&str, usize> = gts.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    if let Some(p) = preds.iter().find(|p| !gt_ids.contains_key(p.id.as_str())) {
        return Err(invalid(format!("predictions for unknown scene `{}`", p.id)));
    }
    gts.par_iter()
        .enumerate()
        .map(|(si, scene)| {
            let pred = by_id.get(scene.id.as_str()).map(|&i| &preds[i]);
            let table = |c: ClassId| -> Result<SceneClass> {
                let targets: Vec<&[Point]> = scene.elements.iter().filter(|e| e.class == c).map(|e| e.points.as_slice()).collect();
                let mine: Vec<(usize, &PredElement)> = pred
                    .map(|p| p.elements.iter().enumerate().filter(|(_, e)| e.class == c && e.confidence >= floor).collect())
                    .unwrap_or_default();
                let dists = mine
                    .iter()
                    .map(|(_, e)| targets.iter().map(|g| chamfer(&e.points, g)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?;
                Ok(SceneClass {
                    scene: si,
                    preds: mine.iter().map(|&(k, e)| (k, e.confidence)).collect(),
                    dists,
                    num_gt: targets.len(),
                })
            };
            Ok([table(ClassId::Divider)?, table(ClassId::PedCrossing)?, table(ClassId::Boundary)?])
        })
        .collect()
}

fn pr_from_tables(tables: &[&SceneClass], tau: f64) -> PrCurve {
    let num_gt = tables.iter().map(|t| t.num_gt).sum();
    // Rank by confidence; ties keep scene then element order.
    let mut ranked: Vec<(usize, usize, f64)> = tables
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| t.preds.iter().enumerate().map(move |(pi, &(_, conf))| (ti, pi, conf)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then((tables[a.0].scene, a.1).cmp(&(tables[b.0].scene, b.1))));
    let mut used: Vec<Vec<bool>> = tables.iter().map(|t| vec![false; t.num_gt]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for &(ti, pi, _) in &ranked {
        let row = &tables[ti].dists[pi];
        let best = (0..row.len())
            .filter(|&g| !used[ti][g] && row[g] < tau)
            .min_by(|&a, &b| row[a].total_cmp(&row[b]));
        match best {
            Some(g) => {
                used[ti][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    PrCurve {
        precision,
        recall,
        num_gt,
        num_pred: ranked.len(),
    }
}

/// Precision/recall curve of one class at one threshold.
pub fn pr_curve(preds: &[PredScene], gts: &[Scene], class: ClassId, tau: f64) -> Result<PrCurve> {
    let tables = scene_tables(preds, gts, f64::NEG_INFINITY)?;
    let refs: Vec<&SceneClass> = tables.iter().map(|t| &t[class.index()]).collect();
    Ok(pr_from_tables(&refs, tau))
}

/// Per-class AP at each threshold, per-class mean over thresholds, and the
/// mean over classes.
pub fn evaluate_ap(preds: &[PredScene], gts: &[Scene], cfg: &EvalConfig) -> Result<ApReport> {
    cfg.validate()?;
    let tables = scene_tables(preds, gts, cfg.confidence_floor)?;
    let mut per_threshold = Vec::with_capacity(NUM_CLASSES);
    let mut per_class = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let refs: Vec<&SceneClass> = tables.iter().map(|t| &t[c]).collect();
        let aps: Vec<f64> = cfg
            .thresholds
            .iter()
            .map(|&tau| interpolated_ap(&pr_from_tables(&refs, tau), cfg.interp_points))
            .collect();
        per_class[c] = aps.iter().sum::<f64>() / aps.len() as f64;
        per_threshold.push(aps);
    }
    Ok(ApReport {
        thresholds: cfg.thresholds.clone(),
        per_threshold,
        map: per_class.iter().sum::<f64>() / NUM_CLASSES as f64,
        per_class,
    })
}

/// Aligned table with one row per threshold set: AP per class, then mAP.
pub fn format_table(rows: &[(&str, &ApReport)]) -> String {
    let mut s = format!("{:<8} {:>8} {:>8} {:>8} {:>8}\n", "set", "AP_ped", "AP_div", "AP_bou", "mAP");
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
            name,
            r.per_class[ClassId::PedCrossing.index()],
            r.per_class[ClassId::Divider.index()],
            r.per_class[ClassId::Boundary.index()],
            r.map
        ));
    }
    s
}

/// CSV with the same columns as [`format_table`].
pub fn format_csv(rows: &[(&str, &ApReport)]) -> String {
    let mut s = String::from("set,ap_ped,ap_div,ap_bou,map\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "{name},{},{},{},{}\n",
            r.per_class[ClassId::PedCrossing.index()],
            r.per_class[ClassId::Divider.index()],
            r.per_class[ClassId::Boundary.index()],
            r.map
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::MapElement;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(id: &str, els: Vec<(ClassId, Vec<Point>)>) -> Scene {
        let mut s = Scene::empty(id);
        s.elements = els
            .into_iter()
            .map(|(class, points)| MapElement {
                class,
                closed: false,
                points,
            })
            .collect();
        s
    }

    fn pred(class: ClassId, points: Vec<Point>, confidence: f64) -> PredElement {
        PredElement {
            class,
            closed: false,
            points,
            confidence,
            class_scores: [0.0; NUM_CLASSES],
        }
    }

    fn shifted(points: &[Point], dy: f64) -> Vec<Point> {
        points.iter().map(|p| [p[0], p[1] + dy]).collect()
    }

    #[test]
    fn chamfer_examples() {
        let p = vec![[0.0, 0.0], [1.0, 0.0]];
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert_eq!(chamfer(&p, &[[0.0, 1.0], [1.0, 1.0]]).unwrap(), 1.0);
        assert!(chamfer(&p, &[]).is_err());
        assert!(chamfer(&[], &p).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p: Vec<Point> = (0..rng.gen_range(1..30)).map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)]).collect();
            let g: Vec<Point> = (0..rng.gen_range(1..30)).map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)]).collect();
            let mut pg = 0.0;
            for a in &p {
                let mut m = f64::MAX;
                for b in &g {
                    m = m.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                }
                pg += m;
            }
            let mut gp = 0.0;
            for b in &g {
                let mut m = f64::MAX;
                for a in &p {
                    m = m.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                }
                gp += m;
            }
            let want = 0.5 * (pg / p.len() as f64 + gp / g.len() as f64);
            assert!((chamfer(&p, &g).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![
            scene("a", vec![(ClassId::Divider, vec![[0.0, 0.0], [0.0, 5.0]]), (ClassId::Boundary, vec![[3.0, 0.0], [3.0, 5.0]])]),
            scene("b", vec![(ClassId::PedCrossing, vec![[1.0, 1.0], [2.0, 1.0]])]),
        ];
        let preds: Vec<PredScene> = gts.iter().map(PredScene::from_scene).collect();
        for cfg in [EvalConfig::map1(), EvalConfig::map2()] {
            let r = evaluate_ap(&preds, &gts, &cfg).unwrap();
            assert_eq!(r.map, 1.0);
            assert!(r.per_threshold.iter().flatten().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn missing_predictions_score_zero() {
        let gts = vec![scene("a", vec![(ClassId::Divider, vec![[0.0, 0.0], [0.0, 5.0]])])];
        let r = evaluate_ap(&[], &gts, &EvalConfig::map2()).unwrap();
        assert_eq!(r.per_class[ClassId::Divider.index()], 0.0);
    }

    #[test]
    fn hand_computed_pr_curve() {
        let line = vec![[0.0, 0.0], [0.0, 5.0]];
        let gts = vec![scene("a", vec![(ClassId::Divider, line.clone())])];
        let preds = vec![PredScene {
            id: "a".into(),
            bev_range: BevRange::default(),
            elements: vec![pred(ClassId::Divider, shifted(&line, 0.1), 0.9), pred(ClassId::Divider, shifted(&line, 9.0), 0.8)],
        }];
        let c = pr_curve(&preds, &gts, ClassId::Divider, 0.5).unwrap();
        assert_eq!(c.precision, vec![1.0, 0.5]);
        assert_eq!(c.recall, vec![1.0, 1.0]);
        assert_eq!(interpolated_ap(&c, 101), 1.0);
    }

    #[test]
    fn ranking_before_matching() {
        // The low-confidence hit comes after a miss: precision 0 then 1/2.
        let line = vec![[0.0, 0.0], [0.0, 5.0]];
        let gts = vec![scene("a", vec![(ClassId::Divider, line.clone())])];
        let preds = vec![PredScene {
            id: "a".into(),
            bev_range: BevRange::default(),
            elements: vec![pred(ClassId::Divider, shifted(&line, 0.1), 0.3), pred(ClassId::Divider, shifted(&line, 9.0), 0.8)],
        }];
        let c = pr_curve(&preds, &gts, ClassId::Divider, 0.5).unwrap();
        assert_eq!(c.precision, vec![0.0, 0.5]);
        assert_eq!(interpolated_ap(&c, 101), 0.5);
    }

    #[test]
    fn empty_class_rule() {
        let empty = PrCurve {
            precision: vec![],
            recall: vec![],
            num_gt: 0,
            num_pred: 0,
        };
        assert_eq!(interpolated_ap(&empty, 101), 1.0);
        let spurious = PrCurve {
            precision: vec![0.0],
            recall: vec![0.0],
            num_gt: 0,
            num_pred: 1,
        };
        assert_eq!(interpolated_ap(&spurious, 101), 0.0);
    }

    #[test]
    fn unknown_scene_is_an_error() {
        let preds = vec![PredScene {
            id: "zz".into(),
            bev_range: BevRange::default(),
            elements: vec![],
        }];
        assert!(evaluate_ap(&preds, &[scene("a", vec![])], &EvalConfig::map2()).is_err());
    }

    #[test]
    fn thresholds_validated() {
        let mut c = EvalConfig::map1();
        c.thresholds = vec![0.5, 0.2];
        assert!(c.validate().is_err());
        c.thresholds = vec![0.0, 0.2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn prediction_records_round_trip() {
        let gts = vec![scene("a", vec![(ClassId::Divider, vec![[0.1, 0.2], [0.3, 1.0 / 3.0]])])];
        let preds: Vec<PredScene> = gts.iter().map(PredScene::from_scene).collect();
        let text = crate::io::to_lines(&preds).unwrap();
        assert!(text.contains("\"confidence\"") && text.contains("\"class_scores\""));
        assert_eq!(crate::io::parse_lines::<PredScene>(&text).unwrap(), preds);
    }

    fn random_set(rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..rng.gen_range(1..10)).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect()
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, g) = (random_set(&mut rng), random_set(&mut rng));
            prop_assert_eq!(chamfer(&p, &g).unwrap(), chamfer(&g, &p).unwrap());
        }

        #[test]
        fn ap_in_unit_interval_and_monotone(seed in 0u64..2_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for s in 0..3 {
                let id = format!("s{s}");
                let els: Vec<(ClassId, Vec<Point>)> = (0..rng.gen_range(0..4))
                    .map(|_| (ClassId::ALL[rng.gen_range(0..3)], random_set(&mut rng)))
                    .collect();
                let mut p = Vec::new();
                for (c, pts) in &els {
                    if rng.gen_bool(0.6) {
                        let dy = rng.gen_range(-1.0..1.0);
                        p.push(pred(*c, shifted(pts, dy), rng.gen_range(0.0..0.99)));
                    }
                }
                for _ in 0..rng.gen_range(0..3) {
                    let c = ClassId::ALL[rng.gen_range(0..3)];
                    let pts = random_set(&mut rng);
                    p.push(pred(c, pts, rng.gen_range(0.0..0.99)));
                }
                preds.push(PredScene { id: id.clone(), bev_range: BevRange::default(), elements: p });
                gts.push(scene(&id, els));
            }
            let cfg = EvalConfig::map2();
            let base = evaluate_ap(&preds, &gts, &cfg).unwrap();
            prop_assert!(base.per_threshold.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
            prop_assert!((base.map - base.per_class.iter().sum::<f64>() / 3.0).abs() < 1e-15);
            // An exact copy, at top confidence, of a target no prediction
            // could have claimed.
            let free = gts.iter().enumerate().find_map(|(i, s)| {
                s.elements
                    .iter()
                    .find(|e| preds[i].elements.iter().all(|p| p.class != e.class))
                    .map(|e| (i, e.clone()))
            });
            if let Some((si, el)) = free {
                let mut more = preds.clone();
                more[si].elements.push(pred(el.class, el.points.clone(), 1.0));
                let after = evaluate_ap(&more, &gts, &cfg).unwrap();
                for (a, b) in after.per_threshold.iter().flatten().zip(base.per_threshold.iter().flatten()) {
                    prop_assert!(a + 1e-12 >= *b, "{} < {}", a, b);
                }
            }
        }
    }
}
