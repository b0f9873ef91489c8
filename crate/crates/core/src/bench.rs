//! Query-count scaling benchmark of the decoder forward pass.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sgq_tensor::{ParamStore, Tape, Tensor};

use crate::config::{DecoderConfig, DecoderMode, InstancePe};
use crate::decoder::Decoder;
use crate::error::{invalid, Result};
use crate::geom::{BevRange, Grid};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub modes: Vec<DecoderMode>,
    pub num_queries: Vec<usize>,
    pub num_points: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub cross_window: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    /// Timed forward passes per record; allocation is taken from the first.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: vec![DecoderMode::Sgq, DecoderMode::PointQuery],
            num_queries: vec![50, 75, 100, 125],
            num_points: 20,
            dim: 256,
            layers: 6,
            heads: 8,
            ffn_dim: 512,
            cross_window: 2,
            bev_h: 200,
            bev_w: 100,
            repeats: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mode: DecoderMode,
    pub num_queries: usize,
    pub num_points: usize,
    pub time_ms: f64,
    /// Largest self-attention score matrix, all heads.
    pub self_attn_scores: usize,
    /// Largest attention score matrix of any kind.
    pub peak_scores: usize,
    /// Every tensor held by the forward pass, parameters and BEV input included.
    pub total_bytes: usize,
}

fn mode_name(m: DecoderMode) -> &'static str {
    match m {
        DecoderMode::Sgq => "sgq",
        DecoderMode::PointQuery => "point_query",
    }
}

/// Runs one forward pass per mode and query count on random BEV features.
pub fn bench_decoder(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repeats == 0 {
        return Err(invalid("bench needs at least one repeat"));
    }
    let grid = Grid::new(cfg.bev_h, cfg.bev_w, BevRange::default())?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bev_data: Vec<f32> = (0..grid.cells() * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
    let bev = Tensor::new(vec![grid.cells(), cfg.dim], bev_data)?;

    let mut records = Vec::new();
    for &mode in &cfg.modes {
        for &nq in &cfg.num_queries {
            let dc = DecoderConfig {
                num_queries: nq,
                num_points: cfg.num_points,
                dim: cfg.dim,
                layers: cfg.layers,
                heads: cfg.heads,
                cross_window: cfg.cross_window,
                instance_pe: InstancePe::None,
                mode,
                temperature: 20.0,
                ffn_dim: cfg.ffn_dim,
            };
            let mut store = ParamStore::<f32>::new();
            let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let decoder = Decoder::new(&mut store, &mut prng, &dc, grid, 0)?;
            let mut stats = None;
            let mut elapsed = 0.0;
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let mut tape = Tape::new();
                let p = store.bind_frozen(&mut tape);
                let b = tape.constant(bev.clone());
                let ctx = decoder.bev_context(&mut tape, b)?;
                decoder.decode(&mut tape, &p, &ctx, &decoder.main)?;
                elapsed += start.elapsed().as_secs_f64();
                stats.get_or_insert_with(|| tape.stats().clone());
            }
            let s = stats.expect("at least one repeat");
            records.push(BenchRecord {
                mode,
                num_queries: nq,
                num_points: cfg.num_points,
                time_ms: 1e3 * elapsed / cfg.repeats as f64,
                self_attn_scores: s.peak_scores.get("self").copied().unwrap_or(0),
                peak_scores: s.peak_scores.values().copied().max().unwrap_or(0),
                total_bytes: s.bytes,
            });
        }
    }
    Ok(records)
}

/// Ratio of `f` between the records of `mode` at query counts `hi` and `lo`.
pub fn ratio(records: &[BenchRecord], mode: DecoderMode, hi: usize, lo: usize, f: impl Fn(&BenchRecord) -> f64) -> Option<f64> {
    let find = |nq| records.iter().find(|r| r.mode == mode && r.num_queries == nq);
    Some(f(find(hi)?) / f(find(lo)?))
}

pub fn format_table(records: &[BenchRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>5} {:>4} {:>11} {:>14} {:>14} {:>10}", "mode", "N_q", "n", "time (ms)", "SA scores", "peak scores", "memory MB");
    for r in records {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>4} {:>11.1} {:>14} {:>14} {:>10.2}",
            mode_name(r.mode),
            r.num_queries,
            r.num_points,
            r.time_ms,
            r.self_attn_scores,
            r.peak_scores,
            r.total_bytes as f64 / 1048576.0
        );
    }
    s
}

pub fn format_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("mode,n_q,n,time_ms,sa_score_elements,peak_score_elements,total_bytes\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{},{},{}",
            mode_name(r.mode),
            r.num_queries,
            r.num_points,
            r.time_ms,
            r.self_attn_scores,
            r.peak_scores,
            r.total_bytes
        );
    }
    s
}
