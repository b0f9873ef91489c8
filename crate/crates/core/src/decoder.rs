//! Map decoders over a BEV feature grid: scatter-and-gather instance queries
//! (`sgq`) and the per-point query baseline (`point_query`).

use rand_chacha::ChaCha8Rng;
use sgq_tensor::{Bound, KeyIndex, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::config::{DecoderConfig, DecoderMode, InstancePe};
use crate::error::{invalid, Result};
use crate::geom::{Grid, NUM_CLASSES};
use crate::nn::{uniform, LayerNorm, Linear, Mlp, MultiHeadAttention};

/// Class logits per instance: the map classes plus background.
pub const NUM_LOGITS: usize = NUM_CLASSES + 1;

/// Sinusoidal encoding of normalised points `a [m, 2]` into `dim` values,
/// x block first. `dim` must be divisible by 4.
pub fn positional_embed<S: Scalar>(tape: &mut Tape<S>, a: Var, dim: usize, temperature: f64) -> Result<Var> {
    if dim % 4 != 0 {
        return Err(invalid(format!("positional embedding width {dim} is not divisible by 4")));
    }
    if tape.shape(a).len() != 2 || tape.shape(a)[1] != 2 {
        return Err(invalid(format!("positional embedding needs [m, 2] points, got {:?}", tape.shape(a))));
    }
    Ok(tape.sine_embed(a, dim / 2, temperature)?)
}

/// Replicates each instance row `n` times.
pub fn scatter<S: Scalar>(tape: &mut Tape<S>, q: Var, n: usize) -> Result<Var> {
    Ok(tape.repeat_rows(q, n)?)
}

/// Concatenates each instance's `n` rows and fuses them with `mlp`.
pub fn gather<S: Scalar>(tape: &mut Tape<S>, p: &Bound, mlp: &Mlp, rows: Var, n: usize) -> Result<Var> {
    let shape = tape.shape(rows).to_vec();
    let d = shape[1];
    if n == 0 || shape[0] % n != 0 || mlp.layers[0].in_dim != n * d {
        return Err(invalid(format!(
            "gather expects a multiple of {n} rows feeding a {}-wide MLP, got {shape:?}",
            mlp.layers[0].in_dim
        )));
    }
    let flat = tape.reshape(rows, &[shape[0] / n, n * d])?;
    mlp.forward(tape, p, flat)
}

/// Learnable query set decoded by the shared layers.
#[derive(Clone, Debug)]
pub struct QueryGroup {
    pub size: usize,
    /// Content vectors `[size, D]`.
    pub embed: ParamId,
    /// Initial reference points as logits `[size, 2n]`.
    pub refs: ParamId,
    /// Instance positional table for `instance_pe = learnable`.
    pub pe: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    /// Point positional projection `LP`.
    pub point_pe: Linear,
    /// Projection of the BEV cell encoding added to keys.
    pub bev_pe: Linear,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
    /// `nD -> D -> D`; SGQ only.
    pub gather: Option<Mlp>,
    pub cls: Mlp,
    /// `D -> D -> 2n` (SGQ) or `D -> D -> 2` (point queries).
    pub pts: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub mode: DecoderMode,
    pub n: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub instance_pe: InstancePe,
    pub temperature: f64,
    pub grid: Grid,
    pub main: QueryGroup,
    /// Extra queries trained against repeated targets.
    pub aux: Option<QueryGroup>,
    /// Per-point content `[n, D]` for point queries.
    pub point_embed: Option<ParamId>,
    /// Shared projection for `bbox` and `center` instance encodings.
    pub instance_proj: Option<Linear>,
    pub layers: Vec<DecoderLayer>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// `[N, NUM_LOGITS]`.
    pub logits: Var,
    /// Refined normalised points `[N, 2n]`.
    pub points: Var,
}

#[derive(Clone, Debug, Default)]
pub struct DecodeOutput {
    pub layers: Vec<LayerPrediction>,
    /// Reference points fed to each layer, `[N * n, 2]`.
    pub refs: Vec<Var>,
    /// Scattered instance queries before positional embedding (SGQ only).
    pub scattered: Vec<Var>,
}

impl DecodeOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// BEV-side tensors shared by every query group in one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BevContext {
    pub bev: Var,
    /// Sinusoidal encoding of normalised cell centres `[H * W, D]`.
    pub cell_pe: Var,
}

/// Initial reference points: instance centres on a lattice over
/// `[0.1, 0.9]^2`, each a short horizontal run of `n` points.
pub fn lattice_refs(size: usize, n: usize) -> Vec<[f64; 2]> {
    let cols = (size as f64).sqrt().ceil().max(1.0) as usize;
    let rows = size.div_ceil(cols).max(1);
    let mut out = Vec::with_capacity(size * n);
    for i in 0..size {
        let (r, c) = (i / cols, i % cols);
        let cx = 0.1 + 0.8 * (c as f64 + 0.5) / cols as f64;
        let cy = 0.1 + 0.8 * (r as f64 + 0.5) / rows as f64;
        for j in 0..n {
            let t = if n > 1 { 2.0 * j as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            out.push([(cx + 0.05 * t).clamp(0.1, 0.9), cy]);
        }
    }
    out
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn zero_last<S: Scalar>(store: &mut ParamStore<S>, mlp: &Mlp) {
    let last = mlp.last();
    *store.get_mut(last.weight) = Tensor::zeros(vec![last.in_dim, last.out_dim]);
    if let Some(b) = last.bias {
        *store.get_mut(b) = Tensor::zeros(vec![last.out_dim]);
    }
}

impl QueryGroup {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        size: usize,
        n: usize,
        dim: usize,
        learnable_pe: bool,
    ) -> Result<Self> {
        let refs: Vec<f64> = lattice_refs(size, n).iter().flatten().map(|&v| logit(v)).collect();
        Ok(Self {
            size,
            embed: store.add(format!("{name}.embed"), uniform(rng, 0.5, &[size, dim]))?,
            refs: store.add(format!("{name}.refs"), Tensor::from_f64(vec![size, 2 * n], &refs)?)?,
            pe: if learnable_pe {
                Some(store.add(format!("{name}.pe"), uniform(rng, 0.5, &[size, dim]))?)
            } else {
                None
            },
        })
    }
}

impl Decoder {
    /// `aux_queries = 0` builds no extra query group.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &DecoderConfig,
        grid: Grid,
        aux_queries: usize,
    ) -> Result<Self> {
        let (n, dim) = (cfg.num_points, cfg.dim);
        if cfg.num_queries == 0 || n == 0 || cfg.layers == 0 {
            return Err(invalid("decoder needs queries, points and at least one layer"));
        }
        if dim % 4 != 0 || dim % cfg.heads.max(1) != 0 || cfg.heads == 0 {
            return Err(invalid(format!("width {dim} must split into 4 and into {} heads", cfg.heads)));
        }
        let learnable = cfg.instance_pe == InstancePe::Learnable;
        let main = QueryGroup::new(store, rng, "decoder.main", cfg.num_queries, n, dim, learnable)?;
        let aux = if aux_queries > 0 {
            Some(QueryGroup::new(store, rng, "decoder.aux", aux_queries, n, dim, learnable)?)
        } else {
            None
        };
        let point_embed = match cfg.mode {
            DecoderMode::Sgq => None,
            DecoderMode::PointQuery => Some(store.add("decoder.point_embed", uniform(rng, 0.5, &[n, dim]))?),
        };
        let instance_proj = match cfg.instance_pe {
            InstancePe::Bbox | InstancePe::Center => {
                Some(Linear::new(store, rng, "decoder.instance_pe", dim, dim, true)?)
            }
            _ => None,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("decoder.{l}");
            let (gather, pts_out) = match cfg.mode {
                DecoderMode::Sgq => (
                    Some(Mlp::new(store, rng, &format!("{name}.gather"), &[n * dim, dim, dim])?),
                    2 * n,
                ),
                DecoderMode::PointQuery => (None, 2),
            };
            let pts = Mlp::new(store, rng, &format!("{name}.pts"), &[dim, dim, pts_out])?;
            zero_last(store, &pts);
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), dim, cfg.heads)?,
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
                point_pe: Linear::new(store, rng, &format!("{name}.point_pe"), dim, dim, true)?,
                bev_pe: Linear::new(store, rng, &format!("{name}.bev_pe"), dim, dim, true)?,
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), dim, cfg.heads)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
                ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[dim, cfg.ffn_dim, dim])?,
                norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
                gather,
                cls: Mlp::new(store, rng, &format!("{name}.cls"), &[dim, dim, NUM_LOGITS])?,
                pts,
            });
        }
        Ok(Self {
            mode: cfg.mode,
            n,
            dim,
            heads: cfg.heads,
            window: cfg.cross_window,
            instance_pe: cfg.instance_pe,
            temperature: cfg.temperature,
            grid,
            main,
            aux,
            point_embed,
            instance_proj,
            layers,
        })
    }

    /// Prepares the BEV cell encoding for `bev [H * W, D]`.
    pub fn bev_context<S: Scalar>(&self, tape: &mut Tape<S>, bev: Var) -> Result<BevContext> {
        let want = [self.grid.cells(), self.dim];
        if tape.shape(bev) != want {
            return Err(invalid(format!("BEV features {:?}, expected {want:?}", tape.shape(bev))));
        }
        let g = self.grid;
        let centres: Vec<f64> = g.centers().iter().flat_map(|&c| g.range.normalize_unchecked(c)).collect();
        let c = tape.constant(Tensor::from_f64(vec![g.cells(), 2], &centres)?);
        let pe = positional_embed(tape, c, self.dim, self.temperature)?;
        Ok(BevContext { bev, cell_pe: pe })
    }

    /// Keys visible to each reference point: dense, or a square window of
    /// `window` cells around the point's cell.
    fn key_index<S: Scalar>(&self, tape: &Tape<S>, refs: Var) -> KeyIndex {
        if self.window == 0 {
            return KeyIndex::Dense;
        }
        let g = self.grid;
        let r = self.window as isize;
        let lists = tape
            .data(refs)
            .chunks(2)
            .map(|a| {
                let (row, col) = g.cell_of_normalized([a[0].as_f64(), a[1].as_f64()]);
                let mut keys = Vec::with_capacity((2 * self.window + 1).pow(2));
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row as isize + dr, col as isize + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < g.h && (cc as usize) < g.w {
                            keys.push((rr as usize * g.w + cc as usize) as u32);
                        }
                    }
                }
                keys
            })
            .collect();
        KeyIndex::Lists(lists)
    }

    /// Instance positional term added to queries and keys of self-attention.
    fn instance_pos<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, group: &QueryGroup, refs: Var) -> Result<Option<Var>> {
        let n = self.n;
        let summary = |pts: &[S], f: &dyn Fn(&[[f64; 2]]) -> Vec<f64>| -> Vec<f64> {
            pts.chunks(2 * n)
                .flat_map(|inst| {
                    let v: Vec<[f64; 2]> = inst.chunks(2).map(|c| [c[0].as_f64(), c[1].as_f64()]).collect();
                    f(&v)
                })
                .collect()
        };
        let encoded = match self.instance_pe {
            InstancePe::None => return Ok(None),
            InstancePe::Learnable => return Ok(group.pe.map(|id| p.var(id))),
            InstancePe::Bbox => {
                let vals = summary(tape.data(refs), &|v| {
                    let fold = |i: usize, f: fn(f64, f64) -> f64, init: f64| v.iter().map(|q| q[i]).fold(init, f);
                    vec![
                        fold(0, f64::min, f64::INFINITY),
                        fold(1, f64::min, f64::INFINITY),
                        fold(0, f64::max, f64::NEG_INFINITY),
                        fold(1, f64::max, f64::NEG_INFINITY),
                    ]
                });
                let c = tape.constant(Tensor::from_f64(vec![group.size, 4], &vals)?);
                tape.sine_embed(c, self.dim / 4, self.temperature)?
            }
            InstancePe::Center => {
                let vals = summary(tape.data(refs), &|v| {
                    let m = v.len() as f64;
                    vec![v.iter().map(|q| q[0]).sum::<f64>() / m, v.iter().map(|q| q[1]).sum::<f64>() / m]
                });
                let c = tape.constant(Tensor::from_f64(vec![group.size, 2], &vals)?);
                positional_embed(tape, c, self.dim, self.temperature)?
            }
        };
        let proj = self.instance_proj.as_ref().expect("projection exists for encoded instance PE");
        Ok(Some(proj.forward(tape, p, encoded)?))
    }

    /// Decodes one query group through every layer.
    pub fn decode<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, ctx: &BevContext, group: &QueryGroup) -> Result<DecodeOutput> {
        let (size, n) = (group.size, self.n);
        let logits = p.var(group.refs);
        let mut refs_inst = tape.sigmoid(logits);
        let mut out = DecodeOutput::default();
        let mut q = match self.point_embed {
            None => p.var(group.embed),
            Some(pe) => {
                let inst = tape.repeat_rows(p.var(group.embed), n)?;
                let tile: Vec<usize> = (0..size * n).map(|i| i % n).collect();
                let pts = tape.index_rows(p.var(pe), &tile)?;
                tape.add(inst, pts)?
            }
        };
        for layer in &self.layers {
            let refs = tape.reshape(refs_inst, &[size * n, 2])?;
            out.refs.push(refs);
            let (next_q, pred) = match self.mode {
                DecoderMode::Sgq => self.sgq_layer(tape, p, layer, ctx, group, q, refs_inst, refs, &mut out)?,
                DecoderMode::PointQuery => self.point_layer(tape, p, layer, ctx, q, refs_inst, refs)?,
            };
            out.layers.push(pred);
            q = next_q;
            refs_inst = tape.detach(pred.points);
        }
        Ok(out)
    }

    fn cross_keys<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, layer: &DecoderLayer, ctx: &BevContext) -> Result<Var> {
        let pe = layer.bev_pe.forward(tape, p, ctx.cell_pe)?;
        Ok(tape.add(ctx.bev, pe)?)
    }

    /// Refines reference points with head offsets in logit space.
    fn refine<S: Scalar>(&self, tape: &mut Tape<S>, refs_inst: Var, offsets: Var) -> Result<Var> {
        let base = tape.inverse_sigmoid(refs_inst);
        let moved = tape.add(base, offsets)?;
        Ok(tape.sigmoid(moved))
    }

    #[allow(clippy::too_many_arguments)]
    fn sgq_layer<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        layer: &DecoderLayer,
        ctx: &BevContext,
        group: &QueryGroup,
        q: Var,
        refs_inst: Var,
        refs: Var,
        out: &mut DecodeOutput,
    ) -> Result<(Var, LayerPrediction)> {
        let n = self.n;
        let qk = match self.instance_pos(tape, p, group, refs_inst)? {
            Some(pos) => tape.add(q, pos)?,
            None => q,
        };
        let sa = layer.self_attn.forward(tape, p, qk, qk, q, KeyIndex::Dense, "self")?;
        let r1 = tape.add(q, sa)?;
        let q1 = layer.norm1.forward(tape, p, r1)?;

        let s = scatter(tape, q1, n)?;
        out.scattered.push(s);
        let sine = positional_embed(tape, refs, self.dim, self.temperature)?;
        let pos = layer.point_pe.forward(tape, p, sine)?;
        let sq = tape.add(s, pos)?;
        let keys = self.cross_keys(tape, p, layer, ctx)?;
        let index = self.key_index(tape, refs);
        let ca = layer.cross_attn.forward(tape, p, sq, keys, ctx.bev, index, "cross")?;
        let r2 = tape.add(s, ca)?;
        let x2 = layer.norm2.forward(tape, p, r2)?;
        let f = layer.ffn.forward(tape, p, x2)?;
        let r3 = tape.add(x2, f)?;
        let x3 = layer.norm3.forward(tape, p, r3)?;

        let mlp = layer.gather.as_ref().expect("SGQ layers gather");
        let q_next = gather(tape, p, mlp, x3, n)?;
        let logits = layer.cls.forward(tape, p, q_next)?;
        let off = layer.pts.forward(tape, p, q_next)?;
        let points = self.refine(tape, refs_inst, off)?;
        Ok((q_next, LayerPrediction { logits, points }))
    }

    #[allow(clippy::too_many_arguments)]
    fn point_layer<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        layer: &DecoderLayer,
        ctx: &BevContext,
        x: Var,
        refs_inst: Var,
        refs: Var,
    ) -> Result<(Var, LayerPrediction)> {
        let (n, d) = (self.n, self.dim);
        let rows = tape.shape(x)[0];
        let sine = positional_embed(tape, refs, d, self.temperature)?;
        let pos = layer.point_pe.forward(tape, p, sine)?;
        let xp = tape.add(x, pos)?;
        let sa = layer.self_attn.forward(tape, p, xp, xp, x, KeyIndex::Dense, "self")?;
        let r1 = tape.add(x, sa)?;
        let x1 = layer.norm1.forward(tape, p, r1)?;

        let xq = tape.add(x1, pos)?;
        let keys = self.cross_keys(tape, p, layer, ctx)?;
        let index = self.key_index(tape, refs);
        let ca = layer.cross_attn.forward(tape, p, xq, keys, ctx.bev, index, "cross")?;
        let r2 = tape.add(x1, ca)?;
        let x2 = layer.norm2.forward(tape, p, r2)?;
        let f = layer.ffn.forward(tape, p, x2)?;
        let r3 = tape.add(x2, f)?;
        let x3 = layer.norm3.forward(tape, p, r3)?;

        let grouped = tape.reshape(x3, &[rows / n, n, d])?;
        let inst = tape.mean_axis(grouped, 1)?;
        let logits = layer.cls.forward(tape, p, inst)?;
        let off = layer.pts.forward(tape, p, x3)?;
        let off = tape.reshape(off, &[rows / n, 2 * n])?;
        let points = self.refine(tape, refs_inst, off)?;
        Ok((x3, LayerPrediction { logits, points }))
    }
}

/// Normalised points of one instance from a `[N, 2n]` prediction row.
pub fn instance_points<S: Scalar>(row: &[S]) -> Vec<[f64; 2]> {
    row.chunks(2).map(|c| [c[0].as_f64(), c[1].as_f64()]).collect()
}

/// Softmax class probabilities per instance from `[N, NUM_LOGITS]` logits.
pub fn class_probs<S: Scalar>(logits: &[S]) -> Vec<[f64; NUM_LOGITS]> {
    logits
        .chunks(NUM_LOGITS)
        .map(|row| {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            std::array::from_fn(|i| e[i] / z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geom::BevRange;
    use crate::nn::check_gradients;
    use rand::SeedableRng;

    fn cfg(mode: DecoderMode, n_q: usize, n: usize, dim: usize, layers: usize) -> DecoderConfig {
        let mut c = Config::default().decoder;
        c.mode = mode;
        c.num_queries = n_q;
        c.num_points = n;
        c.dim = dim;
        c.layers = layers;
        c.heads = 2;
        c.ffn_dim = 2 * dim;
        c
    }

    fn grid() -> Grid {
        Grid::new(8, 8, BevRange::default()).unwrap()
    }

    fn build<S: Scalar>(c: &DecoderConfig, seed: u64) -> (ParamStore<S>, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dec = Decoder::new(&mut store, &mut rng, c, grid(), 0).unwrap();
        (store, dec)
    }

    fn bev<S: Scalar>(tape: &mut Tape<S>, dim: usize, seed: u64) -> Var {
        tape.constant(uniform(&mut ChaCha8Rng::seed_from_u64(seed), 1.0, &[64, dim]))
    }

    fn run(store: &ParamStore<f64>, dec: &Decoder) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let b = bev(&mut tape, dec.dim, 3);
        let ctx = dec.bev_context(&mut tape, b).unwrap();
        let out = dec.decode(&mut tape, &p, &ctx, &dec.main).unwrap();
        out.layers
            .iter()
            .map(|l| (tape.data(l.logits).to_vec(), tape.data(l.points).to_vec()))
            .collect()
    }

    #[test]
    fn same_seed_same_init() {
        let c = cfg(DecoderMode::Sgq, 4, 3, 16, 2);
        let (a, _) = build::<f64>(&c, 1);
        let (b, _) = build::<f64>(&c, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn lattice_inside_unit_box() {
        for (size, n) in [(1, 1), (4, 3), (100, 20), (7, 2)] {
            let r = lattice_refs(size, n);
            assert_eq!(r.len(), size * n);
            assert!(r.iter().flatten().all(|&v| (0.1..=0.9).contains(&v)));
        }
        assert_eq!(lattice_refs(1, 1), vec![[0.5, 0.5]]);
    }

    #[test]
    fn positional_embed_structure() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(Tensor::zeros(vec![1, 2]));
        let pe = positional_embed(&mut tape, zero, 16, 20.0).unwrap();
        let v = tape.data(pe).to_vec();
        for pair in v.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.2]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.9]).unwrap());
        let (pa, pb) = (positional_embed(&mut tape, a, 16, 20.0).unwrap(), positional_embed(&mut tape, b, 16, 20.0).unwrap());
        assert_eq!(&tape.data(pa)[..8], &tape.data(pb)[..8]);
        assert_ne!(&tape.data(pa)[8..], &tape.data(pb)[8..]);
        let again = positional_embed(&mut tape, a, 16, 20.0).unwrap();
        assert_eq!(tape.data(pa), tape.data(again));
        assert!(positional_embed(&mut tape, a, 18, 20.0).is_err());
    }

    #[test]
    fn scatter_copies_rows() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = scatter(&mut tape, q, 2).unwrap();
        assert_eq!(tape.data(s), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let one = scatter(&mut tape, q, 1).unwrap();
        assert_eq!(tape.data(one), tape.data(q));
    }

    #[test]
    fn scatter_gradient_is_n() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let report = check_gradients(
            |t, x| {
                let s = scatter(t, x, 5)?;
                Ok(t.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
        let mut tape = Tape::<f64>::new();
        let v = tape.param(x);
        let s = scatter(&mut tape, v, 5).unwrap();
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 5.0));
    }

    #[test]
    fn gather_reaches_every_row() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&mut store, &mut rng, "g", &[12, 4, 4]).unwrap();
        let x = uniform::<f64>(&mut rng, 1.0, &[6, 4]);
        let f = |t: &mut Tape<f64>, x: Var| {
            let p = store.bind_frozen(t);
            let y = gather(t, &p, &mlp, x, 3)?;
            let w = t.constant(uniform(&mut ChaCha8Rng::seed_from_u64(8), 1.0, &[2, 4]));
            let s = t.mul(y, w)?;
            Ok(t.sum(s))
        };
        let report = check_gradients(f, &x, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = f(&mut tape, v).unwrap();
        let g = tape.backward(loss).unwrap();
        for row in g.get(v).unwrap().data().chunks(4) {
            assert!(row.iter().any(|&d| d != 0.0));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let bad = tape.constant(Tensor::zeros(vec![5, 4]));
        assert!(gather(&mut tape, &p, &mlp, bad, 3).is_err());
        let twins = tape.constant(Tensor::from_fn(vec![6, 4], |i| (i % 12) as f64));
        let y = gather(&mut tape, &p, &mlp, twins, 3).unwrap();
        assert_eq!(&tape.data(y)[..4], &tape.data(y)[4..]);
    }

    #[test]
    fn refined_points_stay_in_unit_box() {
        for mode in [DecoderMode::Sgq, DecoderMode::PointQuery] {
            let c = cfg(mode, 5, 4, 16, 3);
            let (mut store, dec) = build::<f64>(&c, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            for l in &dec.layers {
                let last = l.pts.last();
                *store.get_mut(last.bias.unwrap()) = uniform(&mut rng, 30.0, &[last.out_dim]);
            }
            for (_, pts) in run(&store, &dec) {
                assert!(pts.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn zero_features_leave_residual_path() {
        let c = cfg(DecoderMode::Sgq, 3, 2, 8, 1);
        let (mut store, dec) = build::<f64>(&c, 3);
        let l = &dec.layers[0];
        *store.get_mut(l.cross_attn.v.weight) = Tensor::zeros(vec![8, 8]);
        *store.get_mut(l.cross_attn.v.bias.unwrap()) = Tensor::zeros(vec![8]);
        let bias = Tensor::from_fn(vec![4], |i| 0.1 * i as f64);
        *store.get_mut(l.pts.last().bias.unwrap()) = bias.clone();

        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let b = tape.constant(Tensor::zeros(vec![64, 8]));
        let ctx = dec.bev_context(&mut tape, b).unwrap();
        let out = dec.decode(&mut tape, &p, &ctx, &dec.main).unwrap();
        // Without cross-attention the scattered copies stay identical, so
        // the gather input is the scattered rows through norm and FFN.
        let s = out.scattered[0];
        let x2 = l.norm2.forward(&mut tape, &p, s).unwrap();
        let f = l.ffn.forward(&mut tape, &p, x2).unwrap();
        let r3 = tape.add(x2, f).unwrap();
        let x3 = l.norm3.forward(&mut tape, &p, r3).unwrap();
        let q = gather(&mut tape, &p, l.gather.as_ref().unwrap(), x3, 2).unwrap();
        let want = l.cls.forward(&mut tape, &p, q).unwrap();
        assert_eq!(tape.data(out.layers[0].logits), tape.data(want));
        // The zeroed point head moves references by its bias alone.
        let init = lattice_refs(3, 2);
        for (i, pt) in tape.data(out.layers[0].points).chunks(2).enumerate() {
            for k in 0..2 {
                let a = init[i][k];
                let z = (a / (1.0 - a)).ln() + bias.data()[(i % 2) * 2 + k];
                let want = 1.0 / (1.0 + (-z).exp());
                assert!((pt[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_instances_permutes_outputs() {
        let c = cfg(DecoderMode::Sgq, 5, 3, 16, 2);
        let (store, dec) = build::<f64>(&c, 9);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = store.clone();
        for id in [dec.main.embed, dec.main.refs] {
            let t = store.get(id);
            let cols = t.shape()[1];
            *permuted.get_mut(id) = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[perm[i / cols] * cols + i % cols]);
        }
        let a = run(&store, &dec);
        let b = run(&permuted, &dec);
        for ((la, pa), (lb, pb)) in a.iter().zip(&b) {
            for (row, &src) in perm.iter().enumerate() {
                for k in 0..NUM_LOGITS {
                    assert!((lb[row * NUM_LOGITS + k] - la[src * NUM_LOGITS + k]).abs() < 1e-10);
                }
                for k in 0..6 {
                    assert!((pb[row * 6 + k] - pa[src * 6 + k]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn layers_thread_reference_points() {
        let c = cfg(DecoderMode::Sgq, 3, 4, 16, 3);
        let (store, dec) = build::<f64>(&c, 5);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let b = bev(&mut tape, 16, 1);
        let ctx = dec.bev_context(&mut tape, b).unwrap();
        let out = dec.decode(&mut tape, &p, &ctx, &dec.main).unwrap();
        for l in 1..3 {
            assert_eq!(tape.data(out.refs[l]), tape.data(out.layers[l - 1].points));
        }
        for s in &out.scattered {
            for inst in tape.data(*s).chunks(4 * 16) {
                for row in inst.chunks(16) {
                    assert_eq!(row, &inst[..16]);
                }
            }
        }
        for l in &out.layers {
            assert_eq!(tape.shape(l.logits), &[3, NUM_LOGITS]);
        }
    }

    #[test]
    fn single_layer_matches_first_of_many() {
        let c = cfg(DecoderMode::Sgq, 3, 2, 8, 2);
        let (store, mut dec) = build::<f64>(&c, 6);
        let two = run(&store, &dec);
        dec.layers.truncate(1);
        let one = run(&store, &dec);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], two[0]);
        assert_eq!(run(&store, &dec), one);
    }

    #[test]
    fn self_attention_cost_independent_of_points() {
        let scores = |mode, n| {
            let c = cfg(mode, 6, n, 16, 1);
            let (store, dec) = build::<f64>(&c, 1);
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let b = bev(&mut tape, 16, 1);
            let ctx = dec.bev_context(&mut tape, b).unwrap();
            dec.decode(&mut tape, &p, &ctx, &dec.main).unwrap();
            tape.stats().peak_scores["self"]
        };
        assert_eq!(scores(DecoderMode::Sgq, 5), scores(DecoderMode::Sgq, 20));
        assert_eq!(scores(DecoderMode::PointQuery, 20), 16 * scores(DecoderMode::PointQuery, 5));
        assert_eq!(scores(DecoderMode::PointQuery, 20), 400 * scores(DecoderMode::Sgq, 20));
    }

    #[test]
    fn window_limits_keys() {
        let mut c = cfg(DecoderMode::Sgq, 2, 2, 8, 1);
        c.cross_window = 1;
        let (store, dec) = build::<f64>(&c, 1);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let b = bev(&mut tape, 8, 1);
        let ctx = dec.bev_context(&mut tape, b).unwrap();
        dec.decode(&mut tape, &p, &ctx, &dec.main).unwrap();
        // Every reference sits away from the border, so each sees 3x3 cells.
        assert_eq!(tape.stats().peak_scores["cross"], 2 * 4 * 9);
    }

    #[test]
    fn degenerate_single_query_single_point() {
        for mode in [DecoderMode::Sgq, DecoderMode::PointQuery] {
            let c = cfg(mode, 1, 1, 8, 2);
            let (store, dec) = build::<f64>(&c, 1);
            let out = run(&store, &dec);
            assert_eq!(out[1].0.len(), NUM_LOGITS);
            assert_eq!(out[1].1.len(), 2);
        }
    }

    #[test]
    fn instance_pe_variants_run() {
        for pe in [InstancePe::Bbox, InstancePe::Center, InstancePe::Learnable] {
            let mut c = cfg(DecoderMode::Sgq, 3, 2, 16, 1);
            c.instance_pe = pe;
            let (store, dec) = build::<f64>(&c, 1);
            let out = run(&store, &dec);
            assert!(out[0].0.iter().all(|v| v.is_finite()));
        }
    }
}
