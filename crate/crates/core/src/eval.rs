//! Evaluation metrics: patch-wise CLIP score of stylized frames against
//! the style text, and short/long-range view-consistency RMSE via
//! cross-view reprojection of rendered sequences.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{backproject_pixel, project_point, CameraView};
use crate::tensor::Tensor;
use crate::text::JointEmbedder;

/// Relative depth-agreement tolerance of the occlusion mask.
pub const OCCLUSION_REL_TOL: f64 = 0.01;

// ---- CLIP score ----

/// Deterministic crop origins for the patch-wise score.
pub fn sample_crops(
    seed: u64,
    n_crops: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_crops)
        .map(|_| {
            let y0 = if h > size { rng.gen_range(0..=h - size) } else { 0 };
            let x0 = if w > size { rng.gen_range(0..=w - size) } else { 0 };
            (y0, x0)
        })
        .collect()
}

/// Mean cosine similarity between embeddings of random crops of each image
/// and the style-text embedding (template mean). `crop_size` 0 picks
/// `min(96, H, W)`, the training patch size.
pub fn clip_score(
    images: &[Tensor],
    style_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
    n_crops: usize,
    crop_size: usize,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Parameter("clip score of no images".into()));
    }
    if n_crops == 0 {
        return Err(Error::Parameter("n_crops must be at least 1".into()));
    }
    let text = crate::text::style_text_vector(style_text, embedder, templates)?;
    let t_norm = text.l2_norm();
    if t_norm <= 0.0 {
        return Err(Error::Numeric("style text embedding has zero norm".into()));
    }
    let mut total = 0.0;
    for (idx, image) in images.iter().enumerate() {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let size = if crop_size == 0 {
            96.min(h).min(w)
        } else {
            crop_size
        };
        if size == 0 || size > h.min(w) {
            return Err(Error::Parameter(format!(
                "crop size {size} does not fit a {h}x{w} frame"
            )));
        }
        let crops = sample_crops(seed.wrapping_add(idx as u64), n_crops, h, w, size);
        let mut image_total = 0.0;
        for (y0, x0) in crops {
            let tape = crate::autodiff::Tape::new();
            let v = tape.constant(image.clone());
            let patch = tape.crop(v, y0, x0, size, size);
            let e = embedder.embed_image_any(&tape, patch)?;
            let ev = tape.value(e);
            let n = ev.l2_norm();
            if n <= 0.0 {
                continue;
            }
            image_total += ev.mul(&text).sum() / (n * t_norm);
        }
        total += image_total / n_crops as f64;
    }
    Ok(total / images.len() as f64)
}

// ---- cross-view correspondence ----

/// One matched pixel: integer source pixel in view i, continuous landing
/// position in view j (pixel-center coordinates).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Correspondence {
    pub row_i: usize,
    pub col_i: usize,
    pub u_j: f64,
    pub v_j: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ConsistencyPair {
    pub correspondence: Vec<Correspondence>,
}

/// Reproject every valid pixel of `view_i` into `view_j`; keep it when it
/// lands in frame and view j's depth at the landing pixel agrees within
/// `occlusion_tol` (relative), masking occlusions and out-of-frame pixels.
pub fn build_correspondence(
    view_i: &CameraView,
    view_j: &CameraView,
    occlusion_tol: f64,
) -> Result<ConsistencyPair> {
    let (h, w) = (view_i.intrinsics.height, view_i.intrinsics.width);
    if view_i.depth.data().iter().all(|&d| d <= 0.0) {
        return Err(Error::InvalidDepth { depth: 0.0 });
    }
    if view_j.depth.data().iter().all(|&d| d <= 0.0) {
        return Err(Error::InvalidDepth { depth: 0.0 });
    }
    let (hj, wj) = (view_j.intrinsics.height, view_j.intrinsics.width);
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let d = view_i.depth_at(row, col);
            if d <= 0.0 {
                continue;
            }
            let p = backproject_pixel(
                [col as f64 + 0.5, row as f64 + 0.5],
                d,
                &view_i.intrinsics,
                &view_i.pose,
            )?;
            let Ok(([u, v], z)) = project_point(&p, &view_j.intrinsics, &view_j.pose) else {
                continue;
            };
            if u < 0.0 || v < 0.0 || u >= wj as f64 || v >= hj as f64 {
                continue;
            }
            let dj = view_j.depth_at(v as usize, u as usize);
            if dj <= 0.0 || (dj - z).abs() / z > occlusion_tol {
                continue;
            }
            out.push(Correspondence {
                row_i: row,
                col_i: col,
                u_j: u,
                v_j: v,
            });
        }
    }
    Ok(ConsistencyPair {
        correspondence: out,
    })
}

/// Bilinear sample of `[3, H, W]` at continuous pixel-center coordinates.
pub fn bilinear_sample(image: &Tensor, u: f64, v: f64) -> [f64; 3] {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let gx = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let snap = |f: f64| {
        // fractional offsets at reprojection float-noise level are exact
        // pixel hits; identical static sequences must come out bit-equal
        if f < 1e-9 {
            0.0
        } else if f > 1.0 - 1e-9 {
            1.0
        } else {
            f
        }
    };
    let (fx, fy) = (snap(gx - x0 as f64), snap(gy - y0 as f64));
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = image.at3(c, y0, x0) * (1.0 - fx) + image.at3(c, y0, x1) * fx;
        let bot = image.at3(c, y1, x0) * (1.0 - fx) + image.at3(c, y1, x1) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Squared-error sum and sample count of one frame pair under a
/// correspondence set.
pub fn pair_error(frame_i: &Tensor, frame_j: &Tensor, pair: &ConsistencyPair) -> (f64, usize) {
    let mut total = 0.0;
    for corr in &pair.correspondence {
        let a = [
            frame_i.at3(0, corr.row_i, corr.col_i),
            frame_i.at3(1, corr.row_i, corr.col_i),
            frame_i.at3(2, corr.row_i, corr.col_i),
        ];
        let b = bilinear_sample(frame_j, corr.u_j, corr.v_j);
        for c in 0..3 {
            let d = a[c] - b[c];
            total += d * d;
        }
    }
    (total, pair.correspondence.len())
}

/// RMSE of corresponded RGB between frames `t - stride` and `t`, averaged
/// over all t. Frames must align index-wise with `views`.
pub fn consistency_rmse(
    frames: &[Tensor],
    views: &[CameraView],
    stride: usize,
    occlusion_tol: f64,
) -> Result<f64> {
    if frames.len() != views.len() {
        return Err(Error::Parameter(format!(
            "{} frames but {} views",
            frames.len(),
            views.len()
        )));
    }
    if frames.len() < stride + 1 {
        return Err(Error::Parameter(format!(
            "need at least {} frames for stride {stride}, got {}",
            stride + 1,
            frames.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in stride..frames.len() {
        let pair = build_correspondence(&views[t - stride], &views[t], occlusion_tol)?;
        let (sq, n) = pair_error(&frames[t - stride], &frames[t], &pair);
        total += sq;
        count += n;
    }
    if count == 0 {
        return Err(Error::Degenerate(
            "no valid correspondences in the sequence".into(),
        ));
    }
    Ok((total / (3.0 * count as f64)).sqrt())
}

// ---- report ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairStat {
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    pub matched: usize,
    pub rmse: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub clip_score: f64,
    pub rmse_short: f64,
    pub rmse_long: f64,
    pub short_stride: usize,
    pub long_stride: usize,
    pub per_pair: Vec<PairStat>,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub n_crops: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub occlusion_tol: f64,
    pub short_stride: usize,
    pub long_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_crops: 64,
            crop_size: 0,
            seed: 0,
            occlusion_tol: OCCLUSION_REL_TOL,
            short_stride: 1,
            long_stride: 7,
        }
    }
}

/// Full evaluation of a rendered sequence: CLIP score plus short/long
/// reprojection RMSE with per-pair detail.
pub fn evaluate_frames(
    frames: &[Tensor],
    views: &[CameraView],
    style_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let clip = clip_score(
        frames,
        style_text,
        embedder,
        templates,
        cfg.n_crops,
        cfg.crop_size,
        cfg.seed,
    )?;
    let mut per_pair = Vec::new();
    let mut collect = |stride: usize| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in stride..frames.len() {
            let pair = build_correspondence(&views[t - stride], &views[t], cfg.occlusion_tol)?;
            let (sq, n) = pair_error(&frames[t - stride], &frames[t], &pair);
            per_pair.push(PairStat {
                from: t - stride,
                to: t,
                stride,
                matched: n,
                rmse: if n == 0 {
                    0.0
                } else {
                    (sq / (3.0 * n as f64)).sqrt()
                },
            });
            total += sq;
            count += n;
        }
        if count == 0 {
            return Err(Error::Degenerate("no correspondences".into()));
        }
        Ok((total / (3.0 * count as f64)).sqrt())
    };
    if frames.len() < cfg.long_stride + 1 {
        return Err(Error::Parameter(format!(
            "need at least {} frames for the long-range stride",
            cfg.long_stride + 1
        )));
    }
    let rmse_short = collect(cfg.short_stride)?;
    let rmse_long = collect(cfg.long_stride)?;
    Ok(EvalReport {
        clip_score: clip,
        rmse_short,
        rmse_long,
        short_stride: cfg.short_stride,
        long_stride: cfg.long_stride,
        per_pair,
    })
}
