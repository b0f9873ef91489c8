//! Camera views to vectorised map predictions: encoder, decoder, dense heads
//! and the training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgq_tensor::{Bound, ParamStore, Scalar, Tape, Var};

use crate::config::Config;
use crate::decoder::{class_probs, BevContext, DecodeOutput, Decoder};
use crate::encoder::{BevEncoder, ViewStack, IMAGE_GAP};
use crate::error::{invalid, Result};
use crate::eval::{PredElement, PredScene};
use crate::geom::{BevRange, Camera, ClassId, Grid, Scene, NUM_CLASSES};
use crate::loss::{combine, dense_loss, match_layers, repeat_targets, set_terms, supervised_layers, LossBreakdown, LossVars};
use crate::matching::MatchResult;
use crate::synth::{pv_masks, render_scene_views, scene_to_bev_gt, SynthParams, Target, Views};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub grid: Grid,
    pub encoder: BevEncoder,
    pub decoder: Decoder,
    /// `D -> classes` per BEV cell.
    pub bev_seg: crate::nn::Linear,
    /// `channels -> classes` per camera pixel.
    pub pv_seg: crate::nn::Linear,
}

/// One training or evaluation example with everything precomputed.
#[derive(Clone, Debug)]
pub struct Sample<S> {
    pub scene: Scene,
    pub views: ViewStack<S>,
    pub targets: Vec<Target>,
    /// Cell-major BEV masks `[H * W, classes]`.
    pub bev_masks: Vec<f64>,
    /// Pixel-major masks over the stacked views, gap rows zero.
    pub pv_masks: Vec<f64>,
}

impl<S: Scalar> Sample<S> {
    pub fn new(scene: &Scene, views: &Views, rig: &[Camera], cfg: &Config) -> Result<Self> {
        let gt = scene_to_bev_gt(scene, cfg.bev.h, cfg.bev.w)?;
        let stack = ViewStack::new(views, rig);
        let mut pv = vec![0.0; stack.rows() * stack.w * NUM_CLASSES];
        if cfg.loss.alpha_p != 0.0 {
            for (cam, m) in pv_masks(scene, rig).iter().enumerate() {
                let base = cam * (stack.h + IMAGE_GAP) * stack.w;
                for px in 0..m.h * m.w {
                    for c in 0..NUM_CLASSES {
                        pv[(base + px) * NUM_CLASSES + c] = f64::from(m.masks[c][px]);
                    }
                }
            }
        }
        Ok(Self {
            scene: scene.clone(),
            views: stack,
            targets: gt.elements,
            bev_masks: gt.masks.cell_major(),
            pv_masks: pv,
        })
    }

    /// Renders scene `index` with the synthetic camera model.
    pub fn synthesize(params: &SynthParams, scene: &Scene, index: u64, cfg: &Config) -> Result<Self> {
        let views = render_scene_views(params, scene, index);
        let rig = scene.cameras.clone().unwrap_or_else(|| params.rig.clone());
        Self::new(scene, &views, &rig, cfg)
    }
}

/// Decoder outputs for one forward pass.
pub struct Forward {
    pub bev: Var,
    pub main: DecodeOutput,
    pub aux: Option<DecodeOutput>,
}

/// Loss value on the tape with its breakdown and the matchings used.
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub matches: Vec<MatchResult>,
}

impl Model {
    /// Builds a model and its parameters; `seed` fixes the initialisation.
    pub fn new<S: Scalar>(cfg: &Config, range: BevRange, seed: u64) -> Result<(Self, ParamStore<S>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(cfg.bev.h, cfg.bev.w, range)?;
        let d = cfg.decoder.dim;
        let channels = cfg.synth.channels;
        let encoder = BevEncoder::new(&mut store, &mut rng, &cfg.encoder, grid, d, channels)?;
        let aux = if cfg.loss.beta_m != 0.0 { cfg.loss.t } else { 0 };
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.decoder, grid, aux)?;
        let bev_seg = crate::nn::Linear::new(&mut store, &mut rng, "seg.bev", d, NUM_CLASSES, true)?;
        let pv_seg = crate::nn::Linear::new(&mut store, &mut rng, "seg.pv", channels, NUM_CLASSES, true)?;
        let model = Self {
            config: cfg.clone(),
            grid,
            encoder,
            decoder,
            bev_seg,
            pv_seg,
        };
        Ok((model, store))
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, views: &ViewStack<S>, with_aux: bool) -> Result<Forward> {
        if views.channels != self.encoder.channels {
            return Err(invalid(format!("views have {} channels, model expects {}", views.channels, self.encoder.channels)));
        }
        let enc = self.encoder.forward(tape, p, views)?;
        let ctx: BevContext = self.decoder.bev_context(tape, enc.bev)?;
        let main = self.decoder.decode(tape, p, &ctx, &self.decoder.main)?;
        let aux = match (&self.decoder.aux, with_aux) {
            (Some(g), true) => Some(self.decoder.decode(tape, p, &ctx, g)?),
            _ => None,
        };
        Ok(Forward { bev: enc.bev, main, aux })
    }

    /// Full training objective for one sample.
    pub fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, sample: &Sample<S>) -> Result<LossOutput> {
        let cfg = &self.config.loss;
        let fwd = self.forward(tape, p, &sample.views, true)?;
        let layers = supervised_layers(&fwd.main, cfg.aux_layers);
        let matches = match_layers(tape, layers, &sample.targets, cfg)?;
        let set = set_terms(tape, layers, &sample.targets, &matches, cfg)?;

        let one2many = match &fwd.aux {
            Some(aux) => {
                let rep = repeat_targets(&sample.targets, cfg.k)?;
                let layers = supervised_layers(aux, cfg.aux_layers);
                let m = match_layers(tape, layers, &rep, cfg)?;
                let t = set_terms(tape, layers, &rep, &m, cfg)?;
                let a = tape.add(t.cls, t.p2p)?;
                Some(tape.add(a, t.dir)?)
            }
            None => None,
        };
        let bev = if cfg.alpha_b != 0.0 && cfg.beta_d != 0.0 {
            let logits = self.bev_seg.forward(tape, p, fwd.bev)?;
            Some(dense_loss(tape, logits, &sample.bev_masks)?)
        } else {
            None
        };
        let pv = if cfg.alpha_p != 0.0 && cfg.beta_d != 0.0 {
            let map = tape.constant(sample.views.map.clone());
            let logits = self.pv_seg.forward(tape, p, map)?;
            Some(dense_loss(tape, logits, &sample.pv_masks)?)
        } else {
            None
        };
        let (total, breakdown) = combine(tape, &LossVars { set, one2many, bev, pv }, cfg)?;
        Ok(LossOutput { total, breakdown, matches })
    }

    /// Final-layer predictions in metric coordinates, one per instance
    /// query, labelled by the most likely foreground class.
    pub fn predict<S: Scalar>(&self, store: &ParamStore<S>, sample: &Sample<S>) -> Result<PredScene> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &p, &sample.views, false)?;
        let last = fwd.main.last();
        let range = sample.scene.bev_range;
        let probs = class_probs(tape.data(last.logits));
        let width = tape.shape(last.points)[1];
        let elements = probs
            .iter()
            .zip(tape.data(last.points).chunks(width))
            .map(|(pr, pts)| {
                let scores: [f64; NUM_CLASSES] = std::array::from_fn(|c| pr[c]);
                let best = (0..NUM_CLASSES).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
                let class = ClassId::from_index(best).expect("foreground index");
                PredElement {
                    class,
                    closed: class != ClassId::Divider,
                    points: pts.chunks(2).map(|q| range.denormalize([q[0].as_f64(), q[1].as_f64()])).collect(),
                    confidence: scores[best].clamp(0.0, 1.0),
                    class_scores: scores,
                }
            })
            .collect();
        Ok(PredScene {
            id: sample.scene.id.clone(),
            bev_range: range,
            elements,
        })
    }
}
