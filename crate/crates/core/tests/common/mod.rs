//! Shared fixtures for the integration and acceptance tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgq_core::config::{Config, DecoderConfig, DecoderMode, LossConfig};
use sgq_core::decoder::Decoder;
use sgq_core::geom::{BevRange, ClassId, Grid};
use sgq_core::loss::{match_layers, set_terms, supervised_layers};
use sgq_core::matching::MatchResult;
use sgq_core::nn::{check_gradients, uniform};
use sgq_core::synth::Target;
use sgq_core::Result;
use sgq_tensor::{Bound, GradCheckReport, ParamStore, Tape, Tensor, Var};

/// Central-difference step for whole-decoder checks; the loss sums many
/// terms, so a smaller step loses small gradients to roundoff.
pub const STEP: f64 = 1e-5;

/// N = 4, n = 3, D = 16 on an 8 x 8 BEV, two layers, dense cross-attention.
pub fn tiny_decoder_config() -> DecoderConfig {
    let mut c = Config::default().decoder;
    c.mode = DecoderMode::Sgq;
    c.num_queries = 4;
    c.num_points = 3;
    c.dim = 16;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 32;
    c.cross_window = 0;
    c
}

pub fn tiny_targets() -> Vec<Target> {
    vec![
        Target {
            class: ClassId::Divider,
            closed: false,
            points: vec![[0.2, 0.1], [0.25, 0.5], [0.3, 0.9]],
        },
        Target {
            class: ClassId::PedCrossing,
            closed: true,
            points: vec![[0.6, 0.6], [0.8, 0.6], [0.7, 0.75]],
        },
    ]
}

pub struct TinyDecoder {
    pub decoder: Decoder,
    pub store: ParamStore<f64>,
    pub bev: Tensor<f64>,
    pub targets: Vec<Target>,
    pub loss: LossConfig,
    pub matches: Vec<MatchResult>,
}

impl TinyDecoder {
    /// Builds the decoder with a non-zero final point head and fixes the
    /// matching from one unperturbed forward pass.
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = tiny_decoder_config();
        let grid = Grid::new(8, 8, BevRange::default())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = Decoder::new(&mut store, &mut rng, &cfg, grid, 0)?;
        let head = decoder.layers.last().expect("layers").pts.last().clone();
        *store.get_mut(head.weight) = uniform(&mut rng, 0.3, &[head.in_dim, head.out_dim]);
        *store.get_mut(head.bias.expect("bias")) = uniform(&mut rng, 0.3, &[head.out_dim]);
        let bev = uniform(&mut rng, 1.0, &[grid.cells(), cfg.dim]);
        let mut me = Self {
            decoder,
            store,
            bev,
            targets: tiny_targets(),
            loss: Config::default().loss,
            matches: Vec::new(),
        };
        let mut tape = Tape::new();
        let p = me.store.bind_frozen(&mut tape);
        let b = tape.constant(me.bev.clone());
        let ctx = me.decoder.bev_context(&mut tape, b)?;
        let out = me.decoder.decode(&mut tape, &p, &ctx, &me.decoder.main)?;
        me.matches = match_layers(&tape, supervised_layers(&out, true), &me.targets, &me.loss)?;
        Ok(me)
    }

    /// Set loss over every layer with the stored matching held constant.
    pub fn loss(&self, tape: &mut Tape<f64>, p: &Bound, bev: Var) -> Result<Var> {
        let ctx = self.decoder.bev_context(tape, bev)?;
        let out = self.decoder.decode(tape, p, &ctx, &self.decoder.main)?;
        let s = set_terms(tape, supervised_layers(&out, true), &self.targets, &self.matches, &self.loss)?;
        let a = tape.add(s.cls, s.p2p)?;
        Ok(tape.add(a, s.dir)?)
    }

    /// Parameters whose finite differences also move later reference
    /// points, which the decoder deliberately does not differentiate through.
    pub fn excluded(&self, name: &str) -> bool {
        let last = self.decoder.layers.len() - 1;
        name.ends_with(".refs") || (name.contains(".pts.") && !name.starts_with(&format!("decoder.{last}.")))
    }

    /// One report per checked parameter tensor plus one for the BEV input.
    pub fn gradient_reports(&self) -> Result<Vec<(String, GradCheckReport)>> {
        let mut reports = Vec::new();
        let names: Vec<String> = self.store.names().map(str::to_owned).collect();
        for name in names {
            if self.excluded(&name) {
                continue;
            }
            let id = self.store.id(&name).expect("listed name");
            let report = check_gradients(
                |t, x| {
                    let mut p = self.store.bind_frozen(t);
                    p.replace(id, x);
                    let b = t.constant(self.bev.clone());
                    self.loss(t, &p, b)
                },
                self.store.get(id),
                STEP,
            )?;
            reports.push((name, report));
        }
        let report = check_gradients(
            |t, x| {
                let p = self.store.bind_frozen(t);
                self.loss(t, &p, x)
            },
            &self.bev,
            STEP,
        )?;
        reports.push(("bev".into(), report));
        Ok(reports)
    }
}

/// Biases added uniformly to every attention key: softmax cancels them, so
/// the true gradient is zero and finite differences see only roundoff.
pub fn shifts_keys(name: &str) -> bool {
    name.ends_with(".k.bias") || name.ends_with(".bev_pe.bias")
}

/// Passes when the relative error is below `tol`, or, for key-shift
/// parameters, when both gradients vanish.
pub fn gradient_ok(name: &str, r: &GradCheckReport, tol: f64) -> bool {
    if shifts_keys(name) {
        r.analytic.iter().all(|a| a.abs() < 1e-12) && r.numeric.iter().all(|n| n.abs() < 1e-8)
    } else {
        r.max_rel_error < tol
    }
}
