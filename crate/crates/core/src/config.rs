//! Flat `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SgqError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    Gkt,
    GktH,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstancePe {
    None,
    Bbox,
    Center,
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    Sgq,
    PointQuery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevConfig {
    /// Rows (along y).
    pub h: usize,
    /// Columns (along x).
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub layers: usize,
    pub kernel: usize,
    pub heights: Vec<f64>,
    pub clamp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub num_points: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Square window radius in BEV cells; 0 attends to the whole grid.
    pub cross_window: usize,
    pub instance_pe: InstancePe,
    pub mode: DecoderMode,
    pub temperature: f64,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub beta_o: f64,
    pub beta_m: f64,
    pub beta_d: f64,
    pub alpha_b: f64,
    pub alpha_p: f64,
    pub k: usize,
    /// Size of the one2many query group.
    pub t: usize,
    pub lambda_cls: f64,
    pub lambda_pts: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub aux_layers: bool,
    pub w_cls: f64,
    pub w_pts: f64,
    pub w_dir: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dividers: (usize, usize),
    pub ped_crossings: (usize, usize),
    pub boundaries: (usize, usize),
    pub jitter: f64,
    pub channels: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub bev: BevConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bev: BevConfig { h: 64, w: 32 },
            encoder: EncoderConfig {
                mode: EncoderMode::GktH,
                layers: 3,
                kernel: 3,
                heights: vec![-0.5, 0.0, 0.5, 1.0],
                clamp: 1.5,
            },
            decoder: DecoderConfig {
                num_queries: 100,
                num_points: 20,
                dim: 256,
                layers: 6,
                heads: 8,
                cross_window: 0,
                instance_pe: InstancePe::None,
                mode: DecoderMode::Sgq,
                temperature: 20.0,
                ffn_dim: 512,
            },
            loss: LossConfig {
                beta_o: 1.0,
                beta_m: 1.0,
                beta_d: 1.0,
                alpha_b: 1.0,
                alpha_p: 0.0,
                k: 6,
                t: 300,
                lambda_cls: 2.0,
                lambda_pts: 5.0,
                focal_gamma: 2.0,
                focal_alpha: 0.25,
                aux_layers: true,
                w_cls: 2.0,
                w_pts: 5.0,
                w_dir: 0.005,
            },
            train: TrainConfig {
                iterations: 2000,
                lr: 6e-4,
                weight_decay: 0.01,
                grad_clip: 35.0,
                log_every: 50,
                checkpoint_every: 500,
                eval_every: 0,
            },
            synth: SynthConfig {
                dividers: (1, 4),
                ped_crossings: (0, 2),
                boundaries: (0, 2),
                jitter: 0.5,
                channels: 8,
                sigma: 0.05,
            },
        }
    }
}

fn bad(key: &str, value: &str) -> SgqError {
    SgqError::Config(format!("bad value {value:?} for {key}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn range(key: &str, value: &str) -> Result<(usize, usize)> {
    let (lo, hi) = value.split_once(',').ok_or_else(|| bad(key, value))?;
    let r = (num(key, lo.trim())?, num(key, hi.trim())?);
    if r.0 > r.1 {
        return Err(bad(key, value));
    }
    Ok(r)
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SgqError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (e, d, l, t, s) = (
            &mut self.encoder,
            &mut self.decoder,
            &mut self.loss,
            &mut self.train,
            &mut self.synth,
        );
        match key {
            "bev.H" => self.bev.h = num(key, v)?,
            "bev.W" => self.bev.w = num(key, v)?,
            "encoder.mode" => {
                e.mode = match v {
                    "gkt" => EncoderMode::Gkt,
                    "gkt-h" => EncoderMode::GktH,
                    _ => return Err(bad(key, v)),
                }
            }
            "encoder.layers" => e.layers = num(key, v)?,
            "encoder.kernel" => e.kernel = num(key, v)?,
            "encoder.heights" => e.heights = list(key, v)?,
            "encoder.clamp" => e.clamp = num(key, v)?,
            "decoder.N" => d.num_queries = num(key, v)?,
            "decoder.n" => d.num_points = num(key, v)?,
            "decoder.D" => d.dim = num(key, v)?,
            "decoder.layers" => d.layers = num(key, v)?,
            "decoder.heads" => d.heads = num(key, v)?,
            "decoder.cross_window" => d.cross_window = num(key, v)?,
            "decoder.instance_pe" => {
                d.instance_pe = match v {
                    "none" => InstancePe::None,
                    "bbox" => InstancePe::Bbox,
                    "center" => InstancePe::Center,
                    "learnable" => InstancePe::Learnable,
                    _ => return Err(bad(key, v)),
                }
            }
            "decoder.mode" => {
                d.mode = match v {
                    "sgq" => DecoderMode::Sgq,
                    "point_query" => DecoderMode::PointQuery,
                    _ => return Err(bad(key, v)),
                }
            }
            "decoder.temperature" => d.temperature = num(key, v)?,
            "decoder.ffn" => d.ffn_dim = num(key, v)?,
            "loss.beta_o" => l.beta_o = num(key, v)?,
            "loss.beta_m" => l.beta_m = num(key, v)?,
            "loss.beta_d" => l.beta_d = num(key, v)?,
            "loss.alpha_b" => l.alpha_b = num(key, v)?,
            "loss.alpha_p" => l.alpha_p = num(key, v)?,
            "loss.K" => l.k = num(key, v)?,
            "loss.T" => l.t = num(key, v)?,
            "loss.lambda_cls" => l.lambda_cls = num(key, v)?,
            "loss.lambda_pts" => l.lambda_pts = num(key, v)?,
            "loss.focal_gamma" => l.focal_gamma = num(key, v)?,
            "loss.focal_alpha" => l.focal_alpha = num(key, v)?,
            "loss.aux_layers" => l.aux_layers = flag(key, v)?,
            "loss.w_cls" => l.w_cls = num(key, v)?,
            "loss.w_pts" => l.w_pts = num(key, v)?,
            "loss.w_dir" => l.w_dir = num(key, v)?,
            "train.iterations" => t.iterations = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.grad_clip" => t.grad_clip = num(key, v)?,
            "train.log_every" => t.log_every = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "synth.dividers" => s.dividers = range(key, v)?,
            "synth.ped_crossings" => s.ped_crossings = range(key, v)?,
            "synth.boundaries" => s.boundaries = range(key, v)?,
            "synth.jitter" => s.jitter = num(key, v)?,
            "synth.channels" => s.channels = num(key, v)?,
            "synth.sigma" => s.sigma = num(key, v)?,
            _ => return Err(SgqError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SgqError::Config(m.to_string()));
        let d = &self.decoder;
        if self.bev.h == 0 || self.bev.w == 0 {
            return fail("bev.H and bev.W must be positive");
        }
        if d.num_queries == 0 || d.num_points == 0 || d.layers == 0 || d.ffn_dim == 0 {
            return fail("decoder sizes must be positive");
        }
        if d.dim == 0 || d.dim % 4 != 0 {
            return fail("decoder.D must be a positive multiple of 4");
        }
        if d.heads == 0 || d.dim % d.heads != 0 {
            return fail("decoder.heads must divide decoder.D");
        }
        if !(d.temperature > 0.0) {
            return fail("decoder.temperature must be positive");
        }
        if self.encoder.kernel % 2 == 0 {
            return fail("encoder.kernel must be odd");
        }
        if self.encoder.heights.is_empty() || self.encoder.heights.iter().any(|h| !h.is_finite()) {
            return fail("encoder.heights needs at least one finite value");
        }
        if !(self.encoder.clamp >= 0.0) {
            return fail("encoder.clamp must be non-negative");
        }
        if self.loss.k == 0 {
            return fail("loss.K must be at least 1");
        }
        let l = &self.loss;
        let weights = [l.beta_o, l.beta_m, l.beta_d, l.alpha_b, l.alpha_p, l.w_cls, l.w_pts, l.w_dir];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail("loss weights must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&l.focal_alpha) || !(l.focal_gamma >= 0.0) {
            return fail("focal parameters out of range");
        }
        if !(self.train.lr > 0.0) || self.train.weight_decay < 0.0 {
            return fail("train.lr must be positive and train.weight_decay non-negative");
        }
        if self.synth.sigma < 0.0 || self.synth.jitter < 0.0 {
            return fail("synth.sigma and synth.jitter must be non-negative");
        }
        if self.synth.channels < crate::geom::NUM_CLASSES {
            return fail("synth.channels must cover the class channels");
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`Config::parse`] accepts.
    pub fn to_text(&self) -> String {
        let (e, d, l, t, s) = (&self.encoder, &self.decoder, &self.loss, &self.train, &self.synth);
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("bev.H", self.bev.h.to_string());
        put("bev.W", self.bev.w.to_string());
        put(
            "encoder.mode",
            match e.mode {
                EncoderMode::Gkt => "gkt",
                EncoderMode::GktH => "gkt-h",
            }
            .into(),
        );
        put("encoder.layers", e.layers.to_string());
        put("encoder.kernel", e.kernel.to_string());
        put("encoder.heights", join(&e.heights));
        put("encoder.clamp", e.clamp.to_string());
        put("decoder.N", d.num_queries.to_string());
        put("decoder.n", d.num_points.to_string());
        put("decoder.D", d.dim.to_string());
        put("decoder.layers", d.layers.to_string());
        put("decoder.heads", d.heads.to_string());
        put("decoder.cross_window", d.cross_window.to_string());
        put(
            "decoder.instance_pe",
            match d.instance_pe {
                InstancePe::None => "none",
                InstancePe::Bbox => "bbox",
                InstancePe::Center => "center",
                InstancePe::Learnable => "learnable",
            }
            .into(),
        );
        put(
            "decoder.mode",
            match d.mode {
                DecoderMode::Sgq => "sgq",
                DecoderMode::PointQuery => "point_query",
            }
            .into(),
        );
        put("decoder.temperature", d.temperature.to_string());
        put("decoder.ffn", d.ffn_dim.to_string());
        put("loss.beta_o", l.beta_o.to_string());
        put("loss.beta_m", l.beta_m.to_string());
        put("loss.beta_d", l.beta_d.to_string());
        put("loss.alpha_b", l.alpha_b.to_string());
        put("loss.alpha_p", l.alpha_p.to_string());
        put("loss.K", l.k.to_string());
        put("loss.T", l.t.to_string());
        put("loss.lambda_cls", l.lambda_cls.to_string());
        put("loss.lambda_pts", l.lambda_pts.to_string());
        put("loss.focal_gamma", l.focal_gamma.to_string());
        put("loss.focal_alpha", l.focal_alpha.to_string());
        put("loss.aux_layers", onoff(l.aux_layers).into());
        put("loss.w_cls", l.w_cls.to_string());
        put("loss.w_pts", l.w_pts.to_string());
        put("loss.w_dir", l.w_dir.to_string());
        put("train.iterations", t.iterations.to_string());
        put("train.lr", t.lr.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.grad_clip", t.grad_clip.to_string());
        put("train.log_every", t.log_every.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("synth.dividers", format!("{},{}", s.dividers.0, s.dividers.1));
        put("synth.ped_crossings", format!("{},{}", s.ped_crossings.0, s.ped_crossings.1));
        put("synth.boundaries", format!("{},{}", s.boundaries.0, s.boundaries.1));
        put("synth.jitter", s.jitter.to_string());
        put("synth.channels", s.channels.to_string());
        put("synth.sigma", s.sigma.to_string());
        out
    }
}
