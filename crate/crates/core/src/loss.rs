//! Set-prediction losses, dense segmentation losses and their weighted sum.

use sgq_tensor::{lit, Scalar, Tape, Tensor, Var};

use crate::config::LossConfig;
use crate::decoder::{class_probs, instance_points, DecodeOutput, LayerPrediction, NUM_LOGITS};
use crate::error::{invalid, Result, SgqError};
use crate::geom::{edges, BACKGROUND};
use crate::matching::{match_predictions, CostWeights, MatchResult};
use crate::synth::Target;

/// Edge vectors shorter than this are skipped by the direction loss.
pub const MIN_EDGE: f64 = 1e-9;
const COSINE_EPS: f64 = 1e-12;

/// Weighted loss components and their total, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Focal classification, already scaled by `w_cls`.
    pub cls: f64,
    /// Point-to-point L1, scaled by `w_pts`.
    pub p2p: f64,
    /// Edge direction, scaled by `w_dir`.
    pub dir: f64,
    pub one2many: f64,
    pub bev: f64,
    pub pv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("cls", self.cls),
            ("p2p", self.p2p),
            ("dir", self.dir),
            ("one2many", self.one2many),
            ("bev", self.bev),
            ("pv", self.pv),
        ]
    }
}

/// `beta_o (cls + p2p + dir) + beta_m one2many + beta_d (alpha_b bev + alpha_p pv)`.
/// A non-finite component is reported by name.
pub fn total_loss(b: &LossBreakdown, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in b.components() {
        if !v.is_finite() {
            return Err(SgqError::NonFinite(format!("loss component `{name}` ({v})")));
        }
    }
    Ok(cfg.beta_o * (b.cls + b.p2p + b.dir) + cfg.beta_m * b.one2many + cfg.beta_d * (cfg.alpha_b * b.bev + cfg.alpha_p * b.pv))
}

/// Set-loss terms on the tape, summed over the supervised layers.
#[derive(Clone, Copy, Debug)]
pub struct SetTerms {
    pub cls: Var,
    pub p2p: Var,
    pub dir: Var,
}

fn scalar<S: Scalar>(tape: &mut Tape<S>, v: f64) -> Var {
    tape.constant(Tensor::scalar(lit(v)))
}

/// Layers that receive set supervision: all of them, or only the last.
pub fn supervised_layers(out: &DecodeOutput, all: bool) -> &[LayerPrediction] {
    if all {
        &out.layers
    } else {
        &out.layers[out.layers.len() - 1..]
    }
}

/// Matches every supervised layer against `targets`. Matching reads values
/// only and is not differentiated.
pub fn match_layers<S: Scalar>(tape: &Tape<S>, layers: &[LayerPrediction], targets: &[Target], cfg: &LossConfig) -> Result<Vec<MatchResult>> {
    let w = CostWeights {
        cls: cfg.lambda_cls,
        pts: cfg.lambda_pts,
    };
    layers
        .iter()
        .map(|l| {
            let probs: Vec<Vec<f64>> = class_probs(tape.data(l.logits)).iter().map(|p| p.to_vec()).collect();
            let width = tape.shape(l.points)[1];
            let points: Vec<_> = tape.data(l.points).chunks(width).map(instance_points).collect();
            match_predictions(&probs, &points, targets, w)
        })
        .collect()
}

/// Classification, point-to-point and edge-direction terms for one layer
/// under a fixed matching.
pub fn layer_terms<S: Scalar>(tape: &mut Tape<S>, pred: &LayerPrediction, targets: &[Target], m: &MatchResult, cfg: &LossConfig) -> Result<SetTerms> {
    let rows = tape.shape(pred.logits)[0];
    if tape.shape(pred.logits)[1] != NUM_LOGITS || m.assignment.len() != rows {
        return Err(invalid(format!("matching covers {} of {rows} predictions", m.assignment.len())));
    }
    let labels: Vec<usize> = m
        .assignment
        .iter()
        .map(|a| a.map_or(BACKGROUND, |g| targets[g].class.index()))
        .collect();
    let alpha = cfg.focal_alpha;
    let norm = m.pairs.len().max(1) as f64;
    let weights: Vec<S> = labels
        .iter()
        .map(|&c| lit(if c == BACKGROUND { 1.0 - alpha } else { alpha } * cfg.w_cls / norm))
        .collect();
    let cls = tape.focal_loss(pred.logits, &labels, &weights, lit(cfg.focal_gamma))?;
    if m.pairs.is_empty() {
        let zero = scalar(tape, 0.0);
        return Ok(SetTerms { cls, p2p: zero, dir: zero });
    }

    let n = tape.shape(pred.points)[1] / 2;
    let idx: Vec<usize> = m.pairs.iter().map(|p| p.pred).collect();
    let matched = tape.index_rows(pred.points, &idx)?;
    let mut gt = Vec::with_capacity(idx.len() * 2 * n);
    for pair in &m.pairs {
        let t = &targets[pair.gt];
        if t.points.len() != n {
            return Err(invalid(format!("target has {} points, predictions have {n}", t.points.len())));
        }
        gt.extend(pair.ordering.iter().flat_map(|&k| t.points[k]));
    }
    let gt_var = tape.constant(Tensor::from_f64(vec![idx.len(), 2 * n], &gt)?);
    let l1 = tape.l1_distance(matched, gt_var)?;
    let p2p = tape.scale(l1, lit(cfg.w_pts / (idx.len() * n) as f64));

    // Edge j -> j + 1 of the ordered target, closing edge included for
    // closed elements.
    let flat = tape.reshape(matched, &[idx.len() * n, 2])?;
    let (mut from, mut to, mut gt_edges) = (Vec::new(), Vec::new(), Vec::new());
    for (r, pair) in m.pairs.iter().enumerate() {
        let t = &targets[pair.gt];
        for (a, b) in edges(n, t.closed) {
            let (pa, pb) = (t.points[pair.ordering[a]], t.points[pair.ordering[b]]);
            let e = [pb[0] - pa[0], pb[1] - pa[1]];
            if e[0].hypot(e[1]) <= MIN_EDGE {
                continue;
            }
            from.push(r * n + a);
            to.push(r * n + b);
            gt_edges.extend(e);
        }
    }
    let dir = if from.is_empty() {
        scalar(tape, 0.0)
    } else {
        let pa = tape.index_rows(flat, &from)?;
        let pb = tape.index_rows(flat, &to)?;
        let pe = tape.sub(pb, pa)?;
        let ge = tape.constant(Tensor::from_f64(vec![from.len(), 2], &gt_edges)?);
        let cos = tape.cosine_similarity(pe, ge, lit(COSINE_EPS))?;
        let s = tape.sum(cos);
        let mean = tape.scale(s, lit(-cfg.w_dir / from.len() as f64));
        let base = scalar(tape, cfg.w_dir);
        tape.add(base, mean)?
    };
    Ok(SetTerms { cls, p2p, dir })
}

/// Set terms summed over `layers`, each with its own matching.
pub fn set_terms<S: Scalar>(tape: &mut Tape<S>, layers: &[LayerPrediction], targets: &[Target], matches: &[MatchResult], cfg: &LossConfig) -> Result<SetTerms> {
    if layers.len() != matches.len() || layers.is_empty() {
        return Err(invalid(format!("{} matchings for {} layers", matches.len(), layers.len())));
    }
    let mut acc: Option<SetTerms> = None;
    for (l, m) in layers.iter().zip(matches) {
        let t = layer_terms(tape, l, targets, m, cfg)?;
        acc = Some(match acc {
            None => t,
            Some(a) => SetTerms {
                cls: tape.add(a.cls, t.cls)?,
                p2p: tape.add(a.p2p, t.p2p)?,
                dir: tape.add(a.dir, t.dir)?,
            },
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// The one2one recipe against the targets repeated `k` times.
pub fn repeat_targets(targets: &[Target], k: usize) -> Result<Vec<Target>> {
    if k < 1 {
        return Err(invalid("one2many repeat factor must be at least 1"));
    }
    Ok((0..k).flat_map(|_| targets.iter().cloned()).collect())
}

/// Mean BCE of `[cells, classes]` logits against 0/1 masks.
pub fn dense_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, masks: &[f64]) -> Result<Var> {
    if tape.value(logits).numel() != masks.len() {
        return Err(invalid(format!(
            "segmentation logits {:?} vs {} mask values",
            tape.shape(logits),
            masks.len()
        )));
    }
    let t: Vec<S> = masks.iter().map(|&v| lit(v)).collect();
    Ok(tape.bce_with_logits(logits, &t)?)
}

/// Everything the weighted sum needs, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub set: SetTerms,
    pub one2many: Option<Var>,
    pub bev: Option<Var>,
    pub pv: Option<Var>,
}

/// Builds the total on the tape and the matching numeric breakdown.
pub fn combine<S: Scalar>(tape: &mut Tape<S>, v: &LossVars, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let val = |tape: &Tape<S>, x: Option<Var>| x.map_or(0.0, |x| tape.data(x)[0].as_f64());
    let mut b = LossBreakdown {
        cls: val(tape, Some(v.set.cls)),
        p2p: val(tape, Some(v.set.p2p)),
        dir: val(tape, Some(v.set.dir)),
        one2many: val(tape, v.one2many),
        bev: val(tape, v.bev),
        pv: if cfg.alpha_p == 0.0 { 0.0 } else { val(tape, v.pv) },
        total: 0.0,
    };
    b.total = total_loss(&b, cfg)?;
    let a = tape.add(v.set.cls, v.set.p2p)?;
    let o2o = tape.add(a, v.set.dir)?;
    let mut total = tape.scale(o2o, lit(cfg.beta_o));
    let mut push = |tape: &mut Tape<S>, x: Option<Var>, w: f64| -> Result<()> {
        if let (Some(x), true) = (x, w != 0.0) {
            let s = tape.scale(x, lit(w));
            total = tape.add(total, s)?;
        }
        Ok(())
    };
    push(tape, v.one2many, cfg.beta_m)?;
    push(tape, v.bev, cfg.beta_d * cfg.alpha_b)?;
    push(tape, v.pv, cfg.beta_d * cfg.alpha_p)?;
    Ok((total, b))
}
