use crate::denoiser::NoiseModel;
use crate::diffusion::{rollout_images, NoiseSchedule, StepSubsequence};
use crate::error::{ensure, invalid, Result};
use crate::grid::{ClassMap, Grid, Image};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    /// Probability threshold for the binary mask.
    pub threshold: f64,
    /// Tiles denoised together in one batch.
    pub batch: usize,
    /// Keep every tile's prior-estimate sequence.
    pub keep_traces: bool,
}

impl WindowConfig {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            threshold: 0.5,
            batch: 4,
            keep_traces: false,
        }
    }
}

/// Tile start offsets along one axis; the last tile is aligned to the end.
pub fn tile_origins(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    ensure!(window > 0 && window <= len, "window {window} does not fit in {len}");
    ensure!(stride <= window, "stride {stride} exceeds window {window}");
    let mut out: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *out.last().expect("at least one origin") != len - window {
        out.push(len - window);
    }
    Ok(out)
}

/// Seed of tile `k` in row-major tile order.
pub fn tile_seed(seed: u64, k: usize) -> u64 {
    rng::sub_seed(seed, "tile", k as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stitched {
    pub mask: ClassMap,
    pub probability: Grid<f64>,
    /// Per tile (row-major), the probability view of each prior estimate
    /// with its step, followed by the terminal mask at step 0. Empty unless
    /// requested.
    pub traces: Vec<Vec<(usize, Grid<f64>)>>,
}

/// Runs the reverse process on every tile and averages overlapping tile
/// probabilities with equal weights.
pub fn sliding_window_infer<S: Scalar, M: NoiseModel<S> + ?Sized>(
    image: &Image<S>,
    model: &M,
    sched: &NoiseSchedule,
    steps: &StepSubsequence,
    cfg: &WindowConfig,
    seed: u64,
) -> Result<Stitched> {
    let (h, w) = image.shape();
    let rows = tile_origins(h, cfg.window, cfg.stride)?;
    let cols = tile_origins(w, cfg.window, cfg.stride)?;
    let tiles: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let mut sum = vec![0.0f64; h * w];
    let mut hits = vec![0u32; h * w];
    let win = cfg.window;
    let mut traces = Vec::new();
    for (chunk_idx, chunk) in tiles.chunks(cfg.batch.max(1)).enumerate() {
        let crops = chunk
            .iter()
            .map(|&(r, c)| image.crop(r, c, win, win))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image<S>> = crops.iter().collect();
        let base = chunk_idx * cfg.batch.max(1);
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| tile_seed(seed, base + i)).collect();
        let set = rollout_images(model, &refs, sched, steps, &seeds)?;
        for (&(r0, c0), tr) in chunk.iter().zip(&set.trajectories) {
            if cfg.keep_traces {
                let view = |m: &crate::grid::SignalMask<S>| m.probability().cast::<f64>();
                let mut seq: Vec<(usize, Grid<f64>)> =
                    set.steps.steps().iter().zip(&tr.x0_preds).map(|(&t, m)| (t, view(m))).collect();
                seq.push((0, view(&tr.output)));
                traces.push(seq);
            }
            let p = tr.output.probability();
            for r in 0..win {
                for c in 0..win {
                    let idx = (r0 + r) * w + c0 + c;
                    sum[idx] += p.get(r, c).as_f64();
                    hits[idx] += 1;
                }
            }
        }
    }
    let prob: Vec<f64> = sum
        .iter()
        .zip(&hits)
        .map(|(&s, &n)| {
            debug_assert!(n > 0);
            (s / f64::from(n)).clamp(0.0, 1.0)
        })
        .collect();
    let probability = Grid::from_vec(h, w, prob)?;
    Ok(Stitched {
        mask: ClassMap::threshold(&probability, cfg.threshold),
        probability,
        traces,
    })
}
