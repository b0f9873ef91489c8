//! Projection-guided kernel cross-attention from camera features to a BEV
//! query grid, with fixed (`gkt`) or learned (`gkt-h`) sampling heights.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use sgq_tensor::{lit, Bound, CustomOp, KeyIndex, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::config::{EncoderConfig, EncoderMode};
use crate::error::Result;
use crate::geom::{BevRange, Camera, Grid, Point};
use crate::nn::{uniform, LayerNorm, Linear};
use crate::synth::Views;

/// Zero rows between stacked camera images so kernel taps never bleed
/// from one camera into the next.
pub const IMAGE_GAP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct BevQueryGrid {
    pub grid: Grid,
    /// Cell centres in metres, row-major.
    pub anchors: Vec<Point>,
    /// Anchor heights `z0` in metres.
    pub heights: Vec<f64>,
}

pub fn make_bev_queries(h: usize, w: usize, range: BevRange, heights: &[f64]) -> Result<BevQueryGrid> {
    let grid = Grid::new(h, w, range)?;
    if heights.is_empty() {
        return Err(crate::error::geometry("need at least one anchor height"));
    }
    Ok(BevQueryGrid {
        grid,
        anchors: grid.centers(),
        heights: heights.to_vec(),
    })
}

/// Camera feature images stacked vertically into one bilinear map
/// `[cameras * (h + IMAGE_GAP) * w, channels]`.
#[derive(Clone, Debug)]
pub struct ViewStack<S> {
    pub rig: Vec<Camera>,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub map: Tensor<S>,
}

impl<S: Scalar> ViewStack<S> {
    pub fn new(views: &Views, rig: &[Camera]) -> Self {
        let (h, w, c) = (views.h, views.w, views.channels);
        let rows = views.cameras * (h + IMAGE_GAP);
        let mut data = vec![S::zero(); rows * w * c];
        for cam in 0..views.cameras {
            let pm = views.pixel_major(cam);
            let start = cam * (h + IMAGE_GAP) * w * c;
            for (d, &v) in data[start..start + h * w * c].iter_mut().zip(&pm) {
                *d = lit(f64::from(v));
            }
        }
        Self {
            rig: rig.to_vec(),
            h,
            w,
            channels: c,
            map: Tensor::new(vec![rows * w, c], data).expect("sizes agree"),
        }
    }

    pub fn rows(&self) -> usize {
        self.rig.len() * (self.h + IMAGE_GAP)
    }
}

/// One gathered key: a kernel tap around the projection of `(cell, height)`
/// into camera `cam`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Tap {
    cell: usize,
    height: usize,
    cam: usize,
    du: f64,
    dv: f64,
    id: usize,
}

/// Pixel coordinates of every tap as a differentiable function of the
/// per-cell heights `z [cells, Z]`.
struct Project {
    /// `(d u/d z, d v/d z)` per tap.
    dz: Vec<[f64; 2]>,
    slots: Vec<usize>,
}

impl<S: Scalar> CustomOp<S> for Project {
    fn name(&self) -> &'static str {
        "project-points"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &[S]) -> Vec<Option<Vec<S>>> {
        let mut dz = vec![S::zero(); inputs[0].numel()];
        for (r, (d, &slot)) in self.dz.iter().zip(&self.slots).enumerate() {
            dz[slot] += grad[2 * r] * lit::<S>(d[0]) + grad[2 * r + 1] * lit::<S>(d[1]);
        }
        vec![Some(dz)]
    }

    fn saved_bytes(&self) -> usize {
        self.dz.len() * (2 * std::mem::size_of::<f64>() + std::mem::size_of::<usize>())
    }
}

/// Result of the projection step: tap coordinates, their cell-major key
/// ranges, and tap ids for the kernel embedding.
struct Gathered {
    coords: Var,
    ranges: Vec<Range<usize>>,
    ids: Vec<usize>,
}

fn gather_taps<S: Scalar>(
    tape: &mut Tape<S>,
    queries: &BevQueryGrid,
    views: &ViewStack<S>,
    kernel: usize,
    z: Var,
) -> Gathered {
    let zs = tape.data(z).to_vec();
    let nz = queries.heights.len();
    let r = (kernel / 2) as isize;
    let mut taps = Vec::new();
    let mut ranges = Vec::with_capacity(queries.anchors.len());
    let mut coords = Vec::new();
    let mut dz = Vec::new();
    let mut slots = Vec::new();
    for (cell, a) in queries.anchors.iter().enumerate() {
        let start = taps.len();
        for hz in 0..nz {
            let zv = zs[cell * nz + hz].as_f64();
            for (cam_idx, cam) in views.rig.iter().enumerate() {
                let p = cam.project([a[0], a[1], zv]);
                if !p.valid {
                    continue;
                }
                let c = cam.to_camera([a[0], a[1], zv]);
                let col = [cam.r[2], cam.r[5], cam.r[8]];
                let du = cam.fx * (col[0] * c[2] - c[0] * col[2]) / (c[2] * c[2]);
                let dv = cam.fy * (col[1] * c[2] - c[1] * col[2]) / (c[2] * c[2]);
                let v_off = (cam_idx * (views.h + IMAGE_GAP)) as f64;
                let mut tap_id = hz * kernel * kernel;
                for oy in -r..=r {
                    for ox in -r..=r {
                        let t = Tap {
                            cell,
                            height: hz,
                            cam: cam_idx,
                            du: ox as f64,
                            dv: oy as f64,
                            id: tap_id,
                        };
                        coords.push(lit::<S>(p.u + t.du));
                        coords.push(lit::<S>(p.v + t.dv + v_off));
                        dz.push([du, dv]);
                        slots.push(cell * nz + hz);
                        taps.push(t);
                        tap_id += 1;
                    }
                }
            }
        }
        ranges.push(start..taps.len());
    }
    let out = Tensor::new(vec![taps.len(), 2], coords).expect("two coordinates per tap");
    let coords = tape.custom(&[z], out, Box::new(Project { dz, slots }));
    Gathered {
        coords,
        ranges,
        ids: taps.iter().map(|t| t.id).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Bias-free so cells without keys pass through unchanged.
    pub o: Linear,
    /// Per (height, kernel tap) key embedding, `[Z * k * k, D]`.
    pub taps: ParamId,
    /// Height-offset projection (`gkt-h` only), `D -> Z`.
    pub height: Option<Linear>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub mode: EncoderMode,
    pub kernel: usize,
    pub clamp: f64,
    pub queries: BevQueryGrid,
    pub dim: usize,
    pub channels: usize,
    /// Learnable BEV query table `[H * W, D]`.
    pub table: ParamId,
    pub layers: Vec<EncoderLayer>,
}

/// Encoder outputs for one forward pass.
pub struct Encoded {
    /// `[H * W, D]`, cell-major.
    pub bev: Var,
    /// Sampling heights used by each layer, `[H * W, Z]`.
    pub heights: Vec<Var>,
}

impl BevEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        grid: Grid,
        dim: usize,
        channels: usize,
    ) -> Result<Self> {
        let queries = make_bev_queries(grid.h, grid.w, grid.range, &cfg.heights)?;
        let nz = cfg.heights.len();
        let table = store.add("encoder.queries", uniform(rng, 0.5, &[grid.cells(), dim]))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("encoder.{l}");
            let height = match cfg.mode {
                EncoderMode::Gkt => None,
                EncoderMode::GktH => {
                    let lp = Linear::new(store, rng, &format!("{name}.height"), dim, nz, true)?;
                    *store.get_mut(lp.weight) = Tensor::zeros(vec![dim, nz]);
                    Some(lp)
                }
            };
            layers.push(EncoderLayer {
                q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
                k: Linear::new(store, rng, &format!("{name}.k"), channels, dim, true)?,
                v: Linear::new(store, rng, &format!("{name}.v"), channels, dim, true)?,
                o: Linear::new(store, rng, &format!("{name}.o"), dim, dim, false)?,
                taps: store.add(format!("{name}.taps"), uniform(rng, 0.1, &[nz * cfg.kernel * cfg.kernel, dim]))?,
                height,
                norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            });
        }
        Ok(Self {
            mode: cfg.mode,
            kernel: cfg.kernel,
            clamp: cfg.clamp,
            queries,
            dim,
            channels,
            table,
            layers,
        })
    }

    /// Sampling heights `[cells, Z]`: the anchors themselves in `gkt`
    /// mode, anchors plus a clamped learned offset in `gkt-h` mode.
    pub fn sample_heights<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, layer: &EncoderLayer, q: Var) -> Result<Var> {
        let cells = self.queries.anchors.len();
        let z0 = &self.queries.heights;
        match &layer.height {
            None => {
                let data: Vec<f64> = (0..cells).flat_map(|_| z0.iter().copied()).collect();
                Ok(tape.constant(Tensor::from_f64(vec![cells, z0.len()], &data)?))
            }
            Some(lp) => {
                let off = lp.forward(tape, p, q)?;
                let c = self.clamp;
                let off = tape.clamp(off, lit(-c), lit(c));
                let base = tape.constant(Tensor::from_f64(vec![z0.len()], z0)?);
                Ok(tape.add(off, base)?)
            }
        }
    }

    /// One kernel cross-attention step: `q + O(attention)`, no norm.
    pub fn cross_attend<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        layer: &EncoderLayer,
        views: &ViewStack<S>,
        map: Var,
        q: Var,
        z: Var,
    ) -> Result<Var> {
        let g = gather_taps(tape, &self.queries, views, self.kernel, z);
        if g.ids.is_empty() {
            return Ok(q);
        }
        let sampled = tape.bilinear_sample(map, views.rows(), views.w, g.coords)?;
        let k = layer.k.forward(tape, p, sampled)?;
        let tap = tape.index_rows(p.var(layer.taps), &g.ids)?;
        let k = tape.add(k, tap)?;
        let v = layer.v.forward(tape, p, sampled)?;
        let qp = layer.q.forward(tape, p, q)?;
        let a = tape.attention(qp, k, v, 1, KeyIndex::Ranges(g.ranges), "encoder")?;
        let o = layer.o.forward(tape, p, a)?;
        Ok(tape.add(q, o)?)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, views: &ViewStack<S>) -> Result<Encoded> {
        let map = tape.constant(views.map.clone());
        let mut x = p.var(self.table);
        let mut heights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = self.sample_heights(tape, p, layer, x)?;
            let y = self.cross_attend(tape, p, layer, views, map, x, z)?;
            x = layer.norm.forward(tape, p, y)?;
            heights.push(z);
        }
        Ok(Encoded { bev: x, heights })
    }

    /// Zeroes every height-offset projection, reducing `gkt-h` to `gkt`.
    pub fn zero_height_offsets<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for l in self.layers.iter().filter_map(|l| l.height.as_ref()) {
            let w = store.get(l.weight).shape().to_vec();
            *store.get_mut(l.weight) = Tensor::zeros(w);
            if let Some(b) = l.bias {
                let s = store.get(b).shape().to_vec();
                *store.get_mut(b) = Tensor::zeros(s);
            }
        }
    }
}

/// Reorders cell-major `[H * W, D]` features into `[D, H, W]`.
pub fn to_chw<S: Scalar>(bev: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let d = bev.shape()[1];
    let src = bev.data();
    Tensor::from_fn(vec![d, h, w], |i| {
        let (c, cell) = (i / (h * w), i % (h * w));
        src[cell * d + c]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geom::{default_rig, ClassId, MapElement, Scene};
    use crate::nn::check_gradients;
    use crate::synth::render_views;
    use rand::SeedableRng;

    fn small_cfg(mode: EncoderMode, layers: usize) -> EncoderConfig {
        let mut c = Config::default().encoder;
        c.mode = mode;
        c.layers = layers;
        c
    }

    fn scene() -> Scene {
        let mut s = Scene::empty("enc");
        s.elements.push(MapElement::from_raw(ClassId::Divider, false, &[[-3.0, -20.0], [2.0, 25.0]], 20, &s.bev_range).unwrap());
        s.elements.push(MapElement::from_raw(ClassId::PedCrossing, true, &[[4.0, 5.0], [12.0, 5.0], [12.0, 9.0], [4.0, 9.0]], 20, &s.bev_range).unwrap());
        s
    }

    fn stack<S: Scalar>(rig: &[Camera], sigma: f64) -> ViewStack<S> {
        let v = render_views(&scene(), rig, 4, sigma, 3);
        ViewStack::new(&v, rig)
    }

    #[test]
    fn anchors_are_cell_centres() {
        let one = make_bev_queries(1, 1, BevRange::default(), &[0.0]).unwrap();
        assert_eq!(one.anchors, vec![[0.0, 0.0]]);
        let r = BevRange {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        };
        let two = make_bev_queries(2, 2, r, &[0.0]).unwrap();
        assert_eq!(two.anchors, vec![[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]]);
        let g = make_bev_queries(64, 32, BevRange::default(), &[0.0]).unwrap();
        for row in 0..64 {
            for col in 1..32 {
                assert!(g.anchors[row * 32 + col][0] > g.anchors[row * 32 + col - 1][0]);
            }
        }
        for col in 0..32 {
            for row in 1..64 {
                assert!(g.anchors[row * 32 + col][1] > g.anchors[(row - 1) * 32 + col][1]);
            }
        }
        assert!(make_bev_queries(2, 2, r, &[]).is_err());
    }

    fn build<S: Scalar>(mode: EncoderMode, layers: usize, h: usize, w: usize, dim: usize) -> (ParamStore<S>, BevEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = Grid::new(h, w, BevRange::default()).unwrap();
        let enc = BevEncoder::new(&mut store, &mut rng, &small_cfg(mode, layers), grid, dim, 4).unwrap();
        (store, enc)
    }

    #[test]
    fn gkt_heights_are_the_anchors() {
        let (store, enc) = build::<f64>(EncoderMode::Gkt, 1, 4, 4, 8);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let q = p.var(enc.table);
        let z = enc.sample_heights(&mut tape, &p, &enc.layers[0], q).unwrap();
        for row in tape.data(z).chunks(4) {
            assert_eq!(row, &[-0.5, 0.0, 0.5, 1.0]);
        }
    }

    #[test]
    fn height_offsets_clamp() {
        let (mut store, enc) = build::<f64>(EncoderMode::GktH, 1, 2, 2, 8);
        let lp = enc.layers[0].height.clone().unwrap();
        *store.get_mut(lp.bias.unwrap()) = Tensor::new(vec![4], vec![10.0, -10.0, 0.25, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let z = enc.sample_heights(&mut tape, &p, &enc.layers[0], p.var(enc.table)).unwrap();
        assert_eq!(&tape.data(z)[..4], &[-0.5 + 1.5, 0.0 - 1.5, 0.75, 1.0]);
    }

    #[test]
    fn zero_offset_gkt_h_equals_gkt() {
        let rig = default_rig();
        let views = stack::<f32>(&rig, 0.1);
        for layers in 1..=3 {
            let (store_h, enc_h) = build::<f32>(EncoderMode::GktH, layers, 8, 4, 8);
            let (store_g, enc_g) = build::<f32>(EncoderMode::Gkt, layers, 8, 4, 8);
            let mut shared = store_h.clone();
            shared.load_matching(&store_g).unwrap();
            enc_h.zero_height_offsets(&mut shared);
            let run = |enc: &BevEncoder, store: &ParamStore<f32>| {
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape);
                let out = enc.forward(&mut tape, &p, &views).unwrap();
                tape.data(out.bev).to_vec()
            };
            assert_eq!(run(&enc_h, &shared), run(&enc_g, &store_g));
        }
    }

    #[test]
    fn zero_layers_return_the_table() {
        let (store, enc) = build::<f64>(EncoderMode::GktH, 0, 4, 4, 8);
        let views = stack::<f64>(&default_rig(), 0.0);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let out = enc.forward(&mut tape, &p, &views).unwrap();
        assert_eq!(tape.value(out.bev), store.get(enc.table));
    }

    #[test]
    fn cells_without_projections_are_unchanged() {
        let (store, enc) = build::<f64>(EncoderMode::Gkt, 1, 4, 4, 8);
        let mut views = stack::<f64>(&default_rig(), 0.0);
        // Cameras looking away from the ground see nothing.
        for cam in &mut views.rig {
            cam.t[2] = -1000.0;
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let map = tape.constant(views.map.clone());
        let q = p.var(enc.table);
        let z = enc.sample_heights(&mut tape, &p, &enc.layers[0], q).unwrap();
        let y = enc.cross_attend(&mut tape, &p, &enc.layers[0], &views, map, q, z).unwrap();
        assert_eq!(tape.value(y), store.get(enc.table));
    }

    #[test]
    fn attention_rows_normalise() {
        // Unit values and an identity output map expose each row's weight sum.
        let (mut store, enc) = build::<f64>(EncoderMode::GktH, 1, 8, 4, 8);
        let l = &enc.layers[0];
        *store.get_mut(l.v.weight) = Tensor::zeros(vec![4, 8]);
        *store.get_mut(l.v.bias.unwrap()) = Tensor::full(vec![8], 1.0);
        *store.get_mut(l.o.weight) = Tensor::from_fn(vec![8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let views = stack::<f64>(&default_rig(), 0.1);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let map = tape.constant(views.map.clone());
        let q = p.var(enc.table);
        let z = enc.sample_heights(&mut tape, &p, l, q).unwrap();
        let y = enc.cross_attend(&mut tape, &p, l, &views, map, q, z).unwrap();
        let table = store.get(enc.table).data();
        let mut seen = 0;
        for (yv, xv) in tape.data(y).iter().zip(table) {
            let d = yv - xv;
            if d.abs() > 1e-12 {
                assert!((d - 1.0).abs() < 1e-12, "{d}");
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn more_layers_change_the_output() {
        let views = stack::<f64>(&default_rig(), 0.1);
        let (store2, enc2) = build::<f64>(EncoderMode::GktH, 2, 4, 4, 8);
        let mut one = enc2.clone();
        one.layers.truncate(1);
        let run = |enc: &BevEncoder| {
            let mut tape = Tape::new();
            let p = store2.bind_frozen(&mut tape);
            let out = enc.forward(&mut tape, &p, &views).unwrap();
            tape.data(out.bev).to_vec()
        };
        assert_ne!(run(&one), run(&enc2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let rig = vec![default_rig().remove(0)];
        let views = stack::<f64>(&rig, 0.1);
        let (mut store, enc) = build::<f64>(EncoderMode::GktH, 2, 4, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in &enc.layers {
            let lp = l.height.as_ref().unwrap();
            *store.get_mut(lp.weight) = uniform(&mut rng, 0.2, &[8, 4]);
        }
        let targets = [enc.table, enc.layers[0].height.as_ref().unwrap().weight, enc.layers[1].k.weight];
        for id in targets {
            let x = store.get(id).clone();
            let report = check_gradients(
                |t, x| {
                    let mut p = store.bind_frozen(t);
                    p.replace(id, x);
                    let out = enc.forward(t, &p, &views)?;
                    let w = t.constant(uniform(&mut ChaCha8Rng::seed_from_u64(9), 1.0, &[16, 8]));
                    let s = t.mul(out.bev, w)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{}: {report:?}", store.name(id));
        }
    }
}
