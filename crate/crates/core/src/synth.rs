//! Deterministic synthetic scenes, camera feature images and BEV targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::Config;
use crate::geom::{
    default_rig, rasterize, BevRange, Camera, ClassId, ClassMasks, Grid, MapElement, Point, Scene, NUM_CLASSES,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n: usize,
    pub range: BevRange,
    /// Inclusive element-count ranges indexed by class.
    pub counts: [(usize, usize); NUM_CLASSES],
    pub jitter: f64,
    pub channels: usize,
    pub sigma: f64,
    pub rig: Vec<Camera>,
}

impl SynthParams {
    pub fn from_config(cfg: &Config, seed: u64) -> Self {
        let s = &cfg.synth;
        Self {
            seed,
            n: cfg.decoder.num_points,
            range: BevRange::default(),
            counts: [s.dividers, s.ped_crossings, s.boundaries],
            jitter: s.jitter,
            channels: s.channels,
            sigma: s.sigma,
            rig: default_rig(),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn divider(rng: &mut ChaCha8Rng, range: &BevRange, jitter: f64) -> Vec<Point> {
    let along_y = rng.gen_bool(0.75);
    let (lo, hi, cross_lo, cross_hi) = if along_y {
        (range.y_min, range.y_max, range.x_min, range.x_max)
    } else {
        (range.x_min, range.x_max, range.y_min, range.y_max)
    };
    let span = hi - lo;
    let len = rng.gen_range(0.3 * span..=span);
    let start = lo + rng.gen_range(0.0..=span - len);
    let margin = 0.1 * (cross_hi - cross_lo);
    let offset = rng.gen_range(cross_lo + margin..cross_hi - margin);
    let amp = rng.gen_range(0.0..1.0 + jitter);
    let wavelength = rng.gen_range(0.6 * span..1.5 * span);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..=40)
        .map(|k| {
            let a = start + len * k as f64 / 40.0;
            let b = offset + amp * (std::f64::consts::TAU * a / wavelength + phase).sin();
            if along_y {
                [b, a]
            } else {
                [a, b]
            }
        })
        .collect()
}

fn ped_crossing(rng: &mut ChaCha8Rng, range: &BevRange) -> Vec<Point> {
    let (a, b): (f64, f64) = (rng.gen_range(3.0..4.0), rng.gen_range(6.0..12.0));
    let margin = 0.5 * a.hypot(b) + 0.5;
    let cx = rng.gen_range(range.x_min + margin..range.x_max - margin);
    let cy = rng.gen_range(range.y_min + margin..range.y_max - margin);
    let base = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_2 };
    let (s, c) = (base + rng.gen_range(-0.2..0.2f64)).sin_cos();
    [[-b, -a], [b, -a], [b, a], [-b, a]]
        .iter()
        .map(|p| {
            let (x, y) = (0.5 * p[0], 0.5 * p[1]);
            [cx + c * x - s * y, cy + s * x + c * y]
        })
        .collect()
}

fn boundary(rng: &mut ChaCha8Rng, range: &BevRange, jitter: f64) -> Vec<Point> {
    let cx = rng.gen_range(-0.1..0.1) * range.width() + 0.5 * (range.x_min + range.x_max);
    let cy = rng.gen_range(-0.1..0.1) * range.height() + 0.5 * (range.y_min + range.y_max);
    let max_hx = (range.x_max - cx).min(cx - range.x_min) - 0.5;
    let max_hy = (range.y_max - cy).min(cy - range.y_min) - 0.5;
    let hx = rng.gen_range((0.35 * max_hx).max(5.0).min(max_hx)..=max_hx);
    let hy = rng.gen_range((0.4 * max_hy).max(5.0).min(max_hy)..=max_hy);
    let radius = (rng.gen_range(1.0..3.0) + jitter * rng.gen::<f64>()).min(0.5 * hx.min(hy));
    let corners = [
        (hx - radius, hy - radius, 0.0),
        (-(hx - radius), hy - radius, 0.5),
        (-(hx - radius), -(hy - radius), 1.0),
        (hx - radius, -(hy - radius), 1.5),
    ];
    let mut pts = Vec::with_capacity(36);
    for (ox, oy, start) in corners {
        for k in 0..=8 {
            let a = (start + 0.5 * k as f64 / 8.0) * std::f64::consts::PI;
            pts.push([cx + ox + radius * a.cos(), cy + oy + radius * a.sin()]);
        }
    }
    pts.dedup_by(|a, b| (a[0] - b[0]).hypot(a[1] - b[1]) < 1e-9);
    pts
}

/// Scene `index` of the dataset described by `params`; a pure function of
/// both.
pub fn synth_scene(params: &SynthParams, index: u64) -> Scene {
    let mut rng = stream_rng(params.seed, 2 * index);
    let mut elements = Vec::new();
    for class in ClassId::ALL {
        let (lo, hi) = params.counts[class.index()];
        let count = rng.gen_range(lo..=hi);
        for _ in 0..count {
            let (raw, closed) = match class {
                ClassId::Divider => (divider(&mut rng, &params.range, params.jitter), false),
                ClassId::PedCrossing => (ped_crossing(&mut rng, &params.range), true),
                ClassId::Boundary => (boundary(&mut rng, &params.range, params.jitter), true),
            };
            let el = MapElement::from_raw(class, closed, &raw, params.n, &params.range)
                .expect("synthetic shapes are non-degenerate");
            elements.push(el);
        }
    }
    Scene {
        id: format!("synth-{}-{index:05}", params.seed),
        bev_range: params.range,
        elements,
        cameras: Some(params.rig.clone()),
    }
}

pub fn synth_dataset(params: &SynthParams, count: usize) -> Vec<Scene> {
    (0..count as u64).map(|i| synth_scene(params, i)).collect()
}

/// Per-camera feature images, `[camera][channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub cameras: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Views {
    pub fn zeros(cameras: usize, channels: usize, h: usize, w: usize) -> Self {
        Self {
            cameras,
            channels,
            h,
            w,
            data: vec![0.0; cameras * channels * h * w],
        }
    }

    pub fn index(&self, cam: usize, ch: usize, row: usize, col: usize) -> usize {
        ((cam * self.channels + ch) * self.h + row) * self.w + col
    }

    pub fn at(&self, cam: usize, ch: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(cam, ch, row, col)]
    }

    /// Channel plane of one camera.
    pub fn plane(&self, cam: usize, ch: usize) -> &[f32] {
        let start = self.index(cam, ch, 0, 0);
        &self.data[start..start + self.h * self.w]
    }

    /// One camera as `[h * w, channels]`, pixels row-major.
    pub fn pixel_major(&self, cam: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.h * self.w * self.channels);
        for p in 0..self.h * self.w {
            for ch in 0..self.channels {
                out.push(self.data[(cam * self.channels + ch) * self.h * self.w + p]);
            }
        }
        out
    }
}

/// Splat radius in pixels.
pub const SPLAT_SIGMA: f64 = 1.0;
const DENSIFY_STEP: f64 = 0.25;

fn densify(el: &MapElement) -> Vec<Point> {
    let pts = &el.points;
    if pts.len() == 1 {
        return pts.clone();
    }
    let mut out = Vec::new();
    for (i, j) in el.edges() {
        let (a, b) = (pts[i], pts[j]);
        let steps = ((a[0] - b[0]).hypot(a[1] - b[1]) / DENSIFY_STEP).ceil().max(1.0) as usize;
        for k in 0..steps {
            let t = k as f64 / steps as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    if !el.closed {
        out.push(pts[pts.len() - 1]);
    }
    out
}

/// Max-combines a unit Gaussian blob centred at pixel coordinates `(u, v)`
/// into `plane`. Pixel `(col, row)` is centred at `(col + 0.5, row + 0.5)`.
fn splat(plane: &mut [f32], h: usize, w: usize, u: f64, v: f64) {
    let r = 3.0 * SPLAT_SIGMA;
    let c0 = (u - r - 0.5).floor().max(0.0) as usize;
    let r0 = (v - r - 0.5).floor().max(0.0) as usize;
    let c1 = ((u + r - 0.5).ceil().max(0.0) as usize).min(w - 1);
    let r1 = ((v + r - 0.5).ceil().max(0.0) as usize).min(h - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (dx, dy) = (col as f64 + 0.5 - u, row as f64 + 0.5 - v);
            let d2 = dx * dx + dy * dy;
            if d2 <= r * r {
                let val = (-d2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp() as f32;
                let cell = &mut plane[row * w + col];
                *cell = cell.max(val);
            }
        }
    }
}

/// Smooth, camera-dependent context value for channel `k` (beyond the
/// class channels) at normalised image position `(x, y)`.
fn positional(k: usize, cam: usize, x: f64, y: f64) -> f64 {
    let f = (k / 2 + 1) as f64 * std::f64::consts::PI;
    let sign = if cam % 2 == 0 { 1.0 } else { -1.0 };
    match k % 2 {
        0 => (f * x).sin() * sign,
        _ => (f * y).cos(),
    }
}

/// Renders class splats, positional channels and Gaussian noise of
/// standard deviation `sigma` for every camera of `rig`.
pub fn render_views(scene: &Scene, rig: &[Camera], channels: usize, sigma: f64, noise_seed: u64) -> Views {
    let (h, w) = rig.first().map_or((0, 0), |c| (c.height, c.width));
    assert!(rig.iter().all(|c| c.height == h && c.width == w), "rig cameras must share one image size");
    assert!(channels >= NUM_CLASSES, "need at least one channel per class");
    let mut views = Views::zeros(rig.len(), channels, h, w);
    let dense: Vec<(usize, Vec<Point>)> = scene.elements.iter().map(|e| (e.class.index(), densify(e))).collect();
    for (cam_idx, cam) in rig.iter().enumerate() {
        for (class, pts) in &dense {
            let start = views.index(cam_idx, *class, 0, 0);
            let plane = &mut views.data[start..start + h * w];
            for p in pts {
                let proj = cam.project([p[0], p[1], 0.0]);
                let margin = 3.0 * SPLAT_SIGMA;
                let near = proj.depth > crate::geom::MIN_DEPTH
                    && proj.u > -margin
                    && proj.u < w as f64 + margin
                    && proj.v > -margin
                    && proj.v < h as f64 + margin;
                if near {
                    splat(plane, h, w, proj.u, proj.v);
                }
            }
        }
        for k in NUM_CLASSES..channels {
            for row in 0..h {
                for col in 0..w {
                    let x = (col as f64 + 0.5) / w as f64;
                    let y = (row as f64 + 0.5) / h as f64;
                    let i = views.index(cam_idx, k, row, col);
                    views.data[i] = positional(k - NUM_CLASSES, cam_idx, x, y) as f32;
                }
            }
        }
    }
    if sigma > 0.0 {
        let mut rng = stream_rng(noise_seed, 1);
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
        for v in &mut views.data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    views
}

/// Renders the views of scene `index` with the noise stream tied to it.
pub fn render_scene_views(params: &SynthParams, scene: &Scene, index: u64) -> Views {
    let rig = scene.cameras.as_deref().unwrap_or(&params.rig);
    render_views(scene, rig, params.channels, params.sigma, params.seed.wrapping_add(index.wrapping_mul(0x9E37_79B9)))
}

/// Per-camera per-class perspective-view masks: a pixel is set where the
/// noise-free class splat exceeds one half.
pub fn pv_masks(scene: &Scene, rig: &[Camera]) -> Vec<ClassMasks> {
    let views = render_views(scene, rig, NUM_CLASSES, 0.0, 0);
    (0..rig.len())
        .map(|cam| ClassMasks {
            h: views.h,
            w: views.w,
            masks: std::array::from_fn(|c| views.plane(cam, c).iter().map(|&v| u8::from(v > 0.5)).collect()),
        })
        .collect()
}

/// Normalised ground-truth element used by matching and losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: ClassId,
    pub closed: bool,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevTargets {
    pub masks: ClassMasks,
    pub elements: Vec<Target>,
}

pub fn scene_to_bev_gt(scene: &Scene, h: usize, w: usize) -> crate::Result<BevTargets> {
    let grid = Grid::new(h, w, scene.bev_range)?;
    let masks = rasterize(&scene.elements, &grid);
    let elements = scene
        .elements
        .iter()
        .zip(scene.normalized_elements()?)
        .map(|(e, points)| Target {
            class: e.class,
            closed: e.closed,
            points,
        })
        .collect();
    Ok(BevTargets { masks, elements })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::resample;

    fn params() -> SynthParams {
        SynthParams::from_config(&Config::default(), 7)
    }

    #[test]
    fn zero_counts_give_empty_scene() {
        let mut p = params();
        p.counts = [(0, 0); NUM_CLASSES];
        assert!(synth_scene(&p, 3).elements.is_empty());
    }

    #[test]
    fn deterministic_in_seed_and_index() {
        let p = params();
        assert_eq!(synth_scene(&p, 5), synth_scene(&p, 5));
        assert_ne!(synth_scene(&p, 5), synth_scene(&p, 6));
        let mut q = p.clone();
        q.seed = 8;
        assert_ne!(synth_scene(&p, 5).elements, synth_scene(&q, 5).elements);
    }

    #[test]
    fn generated_elements_are_valid() {
        let mut p = params();
        p.counts = [(0, 3), (0, 2), (0, 2)];
        let mut seen = [0usize; NUM_CLASSES];
        for i in 0..1000 {
            let s = synth_scene(&p, i);
            for el in &s.elements {
                el.validate(p.n, &p.range).unwrap();
                seen[el.class.index()] += 1;
                let expect_closed = el.class != ClassId::Divider;
                assert_eq!(el.closed, expect_closed);
            }
        }
        assert!(seen.iter().all(|&c| c > 100), "{seen:?}");
    }

    #[test]
    fn generated_elements_resample_idempotently() {
        let p = params();
        for i in 0..300 {
            for el in synth_scene(&p, i).elements {
                let again = resample(&el.points, p.n, el.closed).unwrap();
                for (a, b) in el.points.iter().zip(&again) {
                    assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-9, "scene {i} {:?} {}: {a:?} vs {b:?}", el.class, el.points.len());
                }
            }
        }
    }

    #[test]
    fn empty_scene_renders_blank_class_channels() {
        let s = Scene::empty("e");
        let v = render_views(&s, &default_rig(), 8, 0.0, 0);
        assert_eq!((v.cameras, v.channels, v.h, v.w), (2, 8, 64, 128));
        for cam in 0..2 {
            for c in 0..NUM_CLASSES {
                assert!(v.plane(cam, c).iter().all(|&x| x == 0.0));
            }
        }
        assert!(v.plane(0, NUM_CLASSES).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn splat_peaks_at_projected_pixel() {
        let rig = default_rig();
        let world = [2.0, 10.0];
        let mut s = Scene::empty("one");
        s.elements.push(MapElement {
            class: ClassId::Boundary,
            closed: false,
            points: vec![world],
        });
        let v = render_views(&s, &rig, NUM_CLASSES, 0.0, 0);
        let cam = &rig[0];
        // Pinhole oracle written out by hand.
        let r = &cam.r;
        let c: Vec<f64> = (0..3)
            .map(|i| r[3 * i] * world[0] + r[3 * i + 1] * world[1] + cam.t[i])
            .collect();
        let (u, v_px) = (cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy);
        let plane = v.plane(0, ClassId::Boundary.index());
        let best = (0..plane.len()).max_by(|&a, &b| plane[a].total_cmp(&plane[b])).unwrap();
        assert_eq!((best / v.w, best % v.w), (v_px.floor() as usize, u.floor() as usize));
        assert!(v.plane(0, ClassId::Divider.index()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noiseless_rendering_is_bit_identical() {
        let p = params();
        let s = synth_scene(&p, 2);
        let a = render_views(&s, &p.rig, 8, 0.0, 1);
        let b = render_views(&s, &p.rig, 8, 0.0, 99);
        assert_eq!(a, b);
        let n1 = render_views(&s, &p.rig, 8, 0.1, 1);
        assert_eq!(n1, render_views(&s, &p.rig, 8, 0.1, 1));
        assert_ne!(n1, a);
    }

    #[test]
    fn elements_are_visible_in_some_camera() {
        let p = params();
        let s = synth_scene(&p, 0);
        let v = render_views(&s, &p.rig, NUM_CLASSES, 0.0, 0);
        for el in &s.elements {
            let c = el.class.index();
            assert!((0..2).any(|cam| v.plane(cam, c).iter().any(|&x| x > 0.5)));
        }
    }

    #[test]
    fn bev_targets() {
        let e = scene_to_bev_gt(&Scene::empty("e"), 64, 32).unwrap();
        assert!(e.elements.is_empty());
        assert!(e.masks.masks.iter().all(|m| m.iter().all(|&v| v == 0)));
        let mut s = Scene::empty("d");
        s.elements.push(MapElement::from_raw(ClassId::Divider, false, &[[0.2, -20.0], [0.2, 20.0]], 20, &s.bev_range).unwrap());
        let t = scene_to_bev_gt(&s, 64, 32).unwrap();
        assert!(t.masks.count(ClassId::Divider) > 0);
        assert_eq!(t.masks.count(ClassId::PedCrossing) + t.masks.count(ClassId::Boundary), 0);
        let grid = Grid::new(64, 32, s.bev_range).unwrap();
        assert_eq!(t.masks, rasterize(&s.elements, &grid));
        assert!(t.elements[0].points.iter().all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
    }

    #[test]
    fn pv_masks_follow_splats() {
        let p = params();
        let s = synth_scene(&p, 1);
        let m = pv_masks(&s, &p.rig);
        assert_eq!(m.len(), 2);
        let total: usize = m.iter().map(|cm| ClassId::ALL.iter().map(|&c| cm.count(c)).sum::<usize>()).sum();
        assert!(total > 0);
    }
}
