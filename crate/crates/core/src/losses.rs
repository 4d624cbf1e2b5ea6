//! Training objectives.
//!
//! Directional loss: one minus the cosine between the image-embedding
//! displacement (stylized minus content) and the text-embedding
//! displacement (style minus source). The patch variant crops and
//! perspective-augments patches and zeroes per-patch losses at or below
//! the rejection threshold tau. The divergence loss applies the same
//! cosine construction across pairs of *different* styles in a batch, with
//! the content-disparity term subtracted so cross-view content differences
//! don't masquerade as style divergence.
//!
//! All losses are pure functions of their inputs plus an explicit seed;
//! zero-norm displacement directions return the uninformative midpoint 1
//! instead of NaN (rendered == content happens at initialization).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::JointEmbedder;

/// Displacements shorter than this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-8;

/// Named scalar components of one training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub patch: f64,
    pub dir: f64,
    pub cd: f64,
    pub feat: f64,
    pub rgb: f64,
    pub tv: f64,
    pub gs: f64,
    /// `patch + dir - cd`.
    pub total_style: f64,
    /// `lambda_feat * feat + lambda_rgb * rgb`.
    pub total_content: f64,
    /// Full weighted objective of the step.
    pub weighted_total: f64,
}

impl LossReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.patch,
            self.dir,
            self.cd,
            self.feat,
            self.rgb,
            self.tv,
            self.gs,
            self.total_style,
            self.total_content,
            self.weighted_total,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("loss report contains NaN/Inf".into()));
        }
        if (self.total_style - (self.patch + self.dir - self.cd)).abs() > 1e-9 {
            return Err(Error::Numeric(
                "total_style is not patch + dir - cd".into(),
            ));
        }
        Ok(())
    }
}

/// Loss weights; paper-reference values are
/// `lambda_s = 15`, `lambda_feat = 1`, `lambda_rgb = 5e-3`,
/// `lambda_tv = 1.3e-6`, with the whole-image directional term folded
/// into `lambda_s` unless configured separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_feat: f64,
    pub lambda_rgb: f64,
    pub lambda_tv: f64,
    pub lambda_gs: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 15.0,
            lambda_feat: 1.0,
            lambda_rgb: 5e-3,
            lambda_tv: 1.3e-6,
            lambda_gs: None,
        }
    }
}

impl LossWeights {
    pub fn gs_weight(&self) -> f64 {
        self.lambda_gs.unwrap_or(self.lambda_s)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_feat,
            self.lambda_rgb,
            self.lambda_tv,
            self.gs_weight(),
        ];
        if all.iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub n_patches: usize,
    pub patch_size: usize,
    pub tau: f64,
    /// Random-perspective distortion scale (fraction of half extent).
    pub distortion: f64,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        // paper reference: 64 patches of size 96 on full-resolution frames
        Self {
            n_patches: 16,
            patch_size: 32,
            tau: 0.7,
            distortion: 0.5,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.n_patches < 1 {
            return Err(Error::Config("n_patches must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size > h.min(w) {
            return Err(Error::Config(format!(
                "patch_size {} does not fit a {h}x{w} image",
                self.patch_size
            )));
        }
        if !(0.0..=2.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 2], got {}", self.tau)));
        }
        Ok(())
    }
}

// ---- cosine direction ----

/// `1 - cos(di, dt)` with the degenerate (near-zero norm) rule -> 1.
pub fn cosine_direction_loss(di: &Tensor, dt: &Tensor) -> f64 {
    let (ni, nt) = (di.l2_norm(), dt.l2_norm());
    if ni < EPS_NORM || nt < EPS_NORM {
        return 1.0;
    }
    let dot: f64 = di.data().iter().zip(dt.data()).map(|(a, b)| a * b).sum();
    1.0 - dot / (ni * nt)
}

/// Tape version with a differentiable image displacement and a fixed text
/// displacement.
pub fn cosine_direction_loss_var(tape: &Tape, delta_i: Var, delta_t: &Tensor) -> Var {
    let nt = delta_t.l2_norm();
    let ni = tape.value(delta_i).l2_norm();
    if ni < EPS_NORM || nt < EPS_NORM {
        return tape.scalar(1.0);
    }
    let t_unit = tape.constant(delta_t.scale(1.0 / nt));
    let dot = tape.dot(delta_i, t_unit);
    let inv_norm = tape.recip(tape.norm(delta_i));
    let cos = tape.mul(dot, inv_norm);
    tape.add_scalar(tape.neg(cos), 1.0)
}

/// Both displacements differentiable (used pairwise by the divergence
/// loss; swapping the pair negates both and leaves the value unchanged).
pub fn cosine_direction_loss_var2(tape: &Tape, delta_i: Var, delta_t: Var) -> Var {
    let ni = tape.value(delta_i).l2_norm();
    let nt = tape.value(delta_t).l2_norm();
    if ni < EPS_NORM || nt < EPS_NORM {
        return tape.scalar(1.0);
    }
    let dot = tape.dot(delta_i, delta_t);
    let denom = tape.mul(tape.norm(delta_i), tape.norm(delta_t));
    let cos = tape.mul(dot, tape.recip(denom));
    tape.add_scalar(tape.neg(cos), 1.0)
}

// ---- directional (Eq. 3) ----

/// Whole-image directional loss on the tape; `content_embed` is the
/// embedding of the ground-truth content view, `style_vec`/`source_vec`
/// the template-mean text embeddings.
pub fn directional_loss_var(
    tape: &Tape,
    rendered: Var,
    content_embed: &Tensor,
    style_vec: &Tensor,
    source_vec: &Tensor,
    embedder: &dyn JointEmbedder,
) -> Result<Var> {
    let e_render = embedder.embed_image_any(tape, rendered)?;
    let delta_i = tape.sub(e_render, tape.constant(content_embed.clone()));
    let delta_t = style_vec.sub(source_vec);
    Ok(cosine_direction_loss_var(tape, delta_i, &delta_t))
}

/// Value-level directional loss from raw images and style phrases.
pub fn directional_loss(
    rendered: &Tensor,
    content: &Tensor,
    style_text: &str,
    source_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
) -> Result<f64> {
    let style_vec = crate::text::style_text_vector(style_text, embedder, templates)?;
    let source_vec = crate::text::style_text_vector(source_text, embedder, templates)?;
    let content_embed = embedder.embed_image_tensor(content)?;
    let tape = Tape::new();
    let r = tape.constant(rendered.clone());
    let loss = directional_loss_var(&tape, r, &content_embed, &style_vec, &source_vec, embedder)?;
    Ok(tape.item(loss))
}

// ---- patches (Eq. 4) ----

/// One sampled patch: crop origin plus the output-to-input homography of
/// its perspective augmentation (pixel-center coordinates).
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub y0: usize,
    pub x0: usize,
    pub homography: [f64; 9],
}

/// Deterministic patch sampling for an `h x w` image.
pub fn sample_patches(cfg: &PatchConfig, h: usize, w: usize) -> Result<Vec<PatchSample>> {
    cfg.validate(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ps = cfg.patch_size;
    let mut out = Vec::with_capacity(cfg.n_patches);
    for _ in 0..cfg.n_patches {
        let y0 = if h > ps { rng.gen_range(0..=h - ps) } else { 0 };
        let x0 = if w > ps { rng.gen_range(0..=w - ps) } else { 0 };
        let homography = random_perspective(ps, ps, cfg.distortion, &mut rng);
        out.push(PatchSample { y0, x0, homography });
    }
    Ok(out)
}

/// Random perspective: the four image corners move inward by up to
/// `distortion * half extent`, matching the usual augmentation
/// convention. Returns the output-to-input map.
fn random_perspective(h: usize, w: usize, distortion: f64, rng: &mut ChaCha8Rng) -> [f64; 9] {
    let (hw, hh) = (w as f64 / 2.0, h as f64 / 2.0);
    let dx = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..=(distortion * hw).max(1e-9));
    let dy = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..=(distortion * hh).max(1e-9));
    let (wf, hf) = (w as f64, h as f64);
    let dst = [[0.0, 0.0], [wf, 0.0], [0.0, hf], [wf, hf]];
    let src = [
        [dx(rng), dy(rng)],
        [wf - dx(rng), dy(rng)],
        [dx(rng), hf - dy(rng)],
        [wf - dx(rng), hf - dy(rng)],
    ];
    homography_from_points(&dst, &src)
}

/// Solve the 3x3 homography H with `src_i ~ H * dst_i` (output coords to
/// input coords) from four correspondences.
fn homography_from_points(dst: &[[f64; 2]; 4], src: &[[f64; 2]; 4]) -> [f64; 9] {
    let mut a = DMatrix::<f64>::zeros(8, 8);
    let mut b = DVector::<f64>::zeros(8);
    for i in 0..4 {
        let [x, y] = dst[i];
        let [u, v] = src[i];
        a[(2 * i, 0)] = x;
        a[(2 * i, 1)] = y;
        a[(2 * i, 2)] = 1.0;
        a[(2 * i, 6)] = -x * u;
        a[(2 * i, 7)] = -y * u;
        b[2 * i] = u;
        a[(2 * i + 1, 3)] = x;
        a[(2 * i + 1, 4)] = y;
        a[(2 * i + 1, 5)] = 1.0;
        a[(2 * i + 1, 6)] = -x * v;
        a[(2 * i + 1, 7)] = -y * v;
        b[2 * i + 1] = v;
    }
    match a.lu().solve(&b) {
        Some(sol) => [
            sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
        ],
        // degenerate corner draw: fall back to the identity warp
        None => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    }
}

/// Patch rejection `R(s, tau)`: zero at or below the threshold, identity
/// above it, so already-satisfied patches stop contributing gradient.
pub fn patch_rejection(value: f64, tau: f64) -> f64 {
    if value <= tau {
        0.0
    } else {
        value
    }
}

/// Patch-based directional loss on the tape. Crops `n_patches` patches of
/// the rendered image, perspective-augments each, embeds, computes the
/// per-patch directional loss and averages the R-filtered values.
pub fn patch_loss_var(
    tape: &Tape,
    rendered: Var,
    content_embed: &Tensor,
    style_vec: &Tensor,
    source_vec: &Tensor,
    embedder: &dyn JointEmbedder,
    cfg: &PatchConfig,
) -> Result<Var> {
    let shape = tape.shape(rendered);
    let (h, w) = (shape[1], shape[2]);
    let samples = sample_patches(cfg, h, w)?;
    let delta_t = style_vec.sub(source_vec);
    let mut acc: Option<Var> = None;
    for s in &samples {
        let patch = tape.crop(rendered, s.y0, s.x0, cfg.patch_size, cfg.patch_size);
        let warped = tape.warp_perspective(patch, s.homography);
        let e_patch = embedder.embed_image_any(tape, warped)?;
        let delta_i = tape.sub(e_patch, tape.constant(content_embed.clone()));
        let l = cosine_direction_loss_var(tape, delta_i, &delta_t);
        if tape.item(l) <= cfg.tau {
            continue; // rejected: contributes zero value and zero gradient
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    Ok(match acc {
        Some(a) => tape.scale(a, 1.0 / cfg.n_patches as f64),
        None => tape.scalar(0.0),
    })
}

/// Value-level patch loss from raw images and style phrases.
pub fn patch_loss(
    rendered: &Tensor,
    content: &Tensor,
    style_text: &str,
    source_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
    cfg: &PatchConfig,
) -> Result<f64> {
    let style_vec = crate::text::style_text_vector(style_text, embedder, templates)?;
    let source_vec = crate::text::style_text_vector(source_text, embedder, templates)?;
    let content_embed = embedder.embed_image_tensor(content)?;
    let tape = Tape::new();
    let r = tape.constant(rendered.clone());
    let loss = patch_loss_var(&tape, r, &content_embed, &style_vec, &source_vec, embedder, cfg)?;
    Ok(tape.item(loss))
}

// ---- directional divergence (Eq. 5) ----

/// The unordered different-style pairs the divergence loss runs over,
/// deterministically subsampled to `pair_fraction`.
pub fn sample_style_pairs(
    style_ids: &[usize],
    pair_fraction: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&pair_fraction) {
        return Err(Error::Config(format!(
            "pair_fraction must be in [0, 1], got {pair_fraction}"
        )));
    }
    let mut pairs = Vec::new();
    for i in 0..style_ids.len() {
        for j in i + 1..style_ids.len() {
            if style_ids[i] != style_ids[j] {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config(
            "divergence loss needs at least 2 distinct styles".into(),
        ));
    }
    let keep = ((pairs.len() as f64 * pair_fraction).round() as usize)
        .clamp(1, pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates prefix selection
    let total = pairs.len();
    for i in 0..keep {
        let j = rng.gen_range(i..total);
        pairs.swap(i, j);
    }
    pairs.truncate(keep);
    Ok(pairs)
}

/// Divergence loss over already-embedded renders: `items[i]` is the image
/// embedding of render i with its style id; `style_vecs[id]` is the
/// template-mean text embedding of that style.
pub fn divergence_loss_var(
    tape: &Tape,
    items: &[(Var, usize)],
    style_vecs: &[Tensor],
    pair_fraction: f64,
    seed: u64,
) -> Result<(Var, Vec<(usize, usize)>)> {
    let ids: Vec<usize> = items.iter().map(|&(_, id)| id).collect();
    let pairs = sample_style_pairs(&ids, pair_fraction, seed)?;
    let mut acc: Option<Var> = None;
    for &(i, j) in &pairs {
        let delta_t = style_vecs[ids[i]].sub(&style_vecs[ids[j]]);
        let delta_i = tape.sub(items[i].0, items[j].0);
        let l = cosine_direction_loss_var(tape, delta_i, &delta_t);
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    let loss = tape.scale(acc.expect("at least one pair"), 1.0 / pairs.len() as f64);
    Ok((loss, pairs))
}

/// Value-level divergence loss over (stylized image, style text) renders.
pub fn divergence_loss(
    renders: &[(Tensor, String)],
    embedder: &dyn JointEmbedder,
    templates: &[String],
    pair_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let mut style_names: Vec<String> = Vec::new();
    let mut ids = Vec::new();
    for (_, name) in renders {
        let id = match style_names.iter().position(|s| s == name) {
            Some(i) => i,
            None => {
                style_names.push(name.clone());
                style_names.len() - 1
            }
        };
        ids.push(id);
    }
    let style_vecs = style_names
        .iter()
        .map(|s| crate::text::style_text_vector(s, embedder, templates))
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let items: Vec<(Var, usize)> = renders
        .iter()
        .zip(&ids)
        .map(|((img, _), &id)| {
            let v = tape.constant(img.clone());
            Ok((embedder.embed_image_any(&tape, v)?, id))
        })
        .collect::<Result<_>>()?;
    let (loss, _) = divergence_loss_var(&tape, &items, &style_vecs, pair_fraction, seed)?;
    Ok(tape.item(loss))
}

// ---- content disparity (Eq. 6) ----

/// One minus the cosine similarity of two content-image embeddings.
pub fn content_disparity(
    content_i: &Tensor,
    content_j: &Tensor,
    embedder: &dyn JointEmbedder,
) -> Result<f64> {
    let a = embedder.embed_image_tensor(content_i)?;
    let b = embedder.embed_image_tensor(content_j)?;
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na < EPS_NORM || nb < EPS_NORM {
        return Ok(1.0);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// `L_s = L_patch + L_dir - L_cd`.
pub fn style_total(patch: f64, dir: f64, cd: f64) -> f64 {
    patch + dir - cd
}

// ---- content losses ----

/// Perceptual + pixel content loss on the tape: mean squared distance over
/// all encoder stages (equal weights) and mean absolute pixel difference.
pub fn content_loss_var(
    tape: &Tape,
    rendered: Var,
    ground_truth: &Tensor,
    encoder: &dyn ImageEncoder,
) -> Result<(Var, Var)> {
    if tape.shape(rendered) != ground_truth.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", ground_truth.shape()),
            got: format!("{:?}", tape.shape(rendered)),
        });
    }
    let stages_r = encoder.encode_stages(tape, rendered)?;
    let gt = tape.constant(ground_truth.clone());
    let stages_g = encoder.encode_stages(tape, gt)?;
    let mut feat: Option<Var> = None;
    for (r, g) in stages_r.iter().zip(&stages_g) {
        let diff = tape.sub(*r, *g);
        let mse = tape.mean(tape.square(diff));
        feat = Some(match feat {
            Some(acc) => tape.add(acc, mse),
            None => mse,
        });
    }
    let feat = tape.scale(feat.expect("stages"), 1.0 / stages_r.len() as f64);
    let rgb = tape.mean(tape.abs(tape.sub(rendered, gt)));
    Ok((feat, rgb))
}

/// Value-level content loss; returns `(feat, rgb)`.
pub fn content_loss(
    rendered: &Tensor,
    ground_truth: &Tensor,
    encoder: &dyn ImageEncoder,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let r = tape.constant(rendered.clone());
    let (feat, rgb) = content_loss_var(&tape, r, ground_truth, encoder)?;
    Ok((tape.item(feat), tape.item(rgb)))
}

// ---- total variation and whole-image directional ----

/// Mean of squared horizontal plus vertical forward differences.
pub fn tv_loss_var(tape: &Tape, image: Var) -> Var {
    let shape = tape.shape(image);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    if w > 1 {
        let right = tape.crop(image, 0, 1, h, w - 1);
        let left = tape.crop(image, 0, 0, h, w - 1);
        let sq = tape.sum(tape.square(tape.sub(right, left)));
        total = Some(sq);
        count += c * h * (w - 1);
    }
    if h > 1 {
        let down = tape.crop(image, 1, 0, h - 1, w);
        let up = tape.crop(image, 0, 0, h - 1, w);
        let sq = tape.sum(tape.square(tape.sub(down, up)));
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
        count += c * (h - 1) * w;
    }
    match total {
        Some(t) => tape.scale(t, 1.0 / count as f64),
        None => tape.scalar(0.0),
    }
}

pub fn tv_loss(image: &Tensor) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(image.clone());
    let l = tv_loss_var(&tape, v);
    tape.item(l)
}

/// Whole-image directional loss (Eq. 3 applied once, no patches).
pub fn gs_loss(
    rendered: &Tensor,
    content: &Tensor,
    style_text: &str,
    source_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
) -> Result<f64> {
    directional_loss(rendered, content, style_text, source_text, embedder, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_difference;
    use crate::text::{default_templates, StubEmbedder, CLIP_IMAGE_SIZE};

    fn unit(dim: usize, axis: usize) -> Tensor {
        let mut t = Tensor::zeros(&[dim]);
        t.data_mut()[axis] = 1.0;
        t
    }

    #[test]
    fn cosine_trivial_identities() {
        let e0 = unit(4, 0);
        let e1 = unit(4, 1);
        assert_eq!(cosine_direction_loss(&e0, &e0), 0.0);
        assert_eq!(cosine_direction_loss(&e0, &e0.scale(-1.0)), 2.0);
        assert_eq!(cosine_direction_loss(&e0, &e1), 1.0);
        assert_eq!(cosine_direction_loss(&Tensor::zeros(&[4]), &e0), 1.0);
    }

    #[test]
    fn rendered_equal_to_content_gives_degenerate_one() {
        let embedder = StubEmbedder::new(1, 16).unwrap();
        let templates = default_templates();
        let img = Tensor::full(&[3, 16, 16], 0.4);
        let l = directional_loss(&img, &img, "fire", "a Photo", &embedder, &templates).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn aligned_displacements_give_zero() {
        // choose text vectors whose difference equals the image
        // displacement produced by the stub's linear map
        let embedder = StubEmbedder::new(2, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.1, 0.9, &mut rng);
        let b = Tensor::rand_uniform(&[3, 16, 16], 0.1, 0.9, &mut rng);
        let ea = embedder.embed_image_tensor(&a).unwrap();
        let eb = embedder.embed_image_tensor(&b).unwrap();
        let delta_i = ea.sub(&eb);

        let tape = Tape::new();
        let av = tape.constant(a);
        let loss =
            directional_loss_var(&tape, av, &eb, &delta_i, &Tensor::zeros(&[16]), &embedder)
                .unwrap();
        assert!(tape.item(loss).abs() < 1e-6);
    }

    #[test]
    fn swapping_style_and_source_mirrors_the_loss() {
        let embedder = StubEmbedder::new(3, 16).unwrap();
        let templates = default_templates();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rendered = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let content = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let l = directional_loss(&rendered, &content, "fire", "a Photo", &embedder, &templates)
            .unwrap();
        let l_swapped =
            directional_loss(&rendered, &content, "a Photo", "fire", &embedder, &templates)
                .unwrap();
        assert!((l_swapped - (2.0 - l)).abs() < 1e-9);
    }

    #[test]
    fn full_rejection_yields_zero() {
        let embedder = StubEmbedder::new(4, 16).unwrap();
        let templates = default_templates();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rendered = Tensor::rand_uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
        let content = Tensor::rand_uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
        let cfg = PatchConfig {
            n_patches: 4,
            patch_size: 12,
            tau: 2.0,
            distortion: 0.5,
            seed: 5,
        };
        let l = patch_loss(&rendered, &content, "fire", "a Photo", &embedder, &templates, &cfg)
            .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn tau_zero_is_the_plain_mean_and_matches_independent_recompute() {
        let embedder = StubEmbedder::new(4, 16).unwrap();
        let templates = default_templates();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rendered = Tensor::rand_uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
        let content = Tensor::rand_uniform(&[3, 24, 24], 0.0, 1.0, &mut rng);
        let cfg = PatchConfig {
            n_patches: 4,
            patch_size: 12,
            tau: 0.0,
            distortion: 0.5,
            seed: 5,
        };
        let got = patch_loss(&rendered, &content, "fire", "a Photo", &embedder, &templates, &cfg)
            .unwrap();

        // independent recomputation: same sampled patches, each loss
        // computed on its own tape, R applied by hand
        let style_vec = crate::text::style_text_vector("fire", &embedder, &templates).unwrap();
        let source_vec =
            crate::text::style_text_vector("a Photo", &embedder, &templates).unwrap();
        let content_embed = embedder.embed_image_tensor(&content).unwrap();
        let delta_t = style_vec.sub(&source_vec);
        let samples = sample_patches(&cfg, 24, 24).unwrap();
        let mut acc = 0.0;
        let mut all_positive = true;
        for s in &samples {
            let tape = Tape::new();
            let r = tape.constant(rendered.clone());
            let patch = tape.crop(r, s.y0, s.x0, 12, 12);
            let warped = tape.warp_perspective(patch, s.homography);
            let e = embedder.embed_image_any(&tape, warped).unwrap();
            let di = tape.sub(e, tape.constant(content_embed.clone()));
            let l = tape.item(cosine_direction_loss_var(&tape, di, &delta_t));
            all_positive &= l > 0.0;
            acc += patch_rejection(l, cfg.tau);
        }
        assert!(all_positive, "test premise: every patch loss positive");
        assert!((got - acc / 4.0).abs() < 1e-9, "{got} vs {}", acc / 4.0);
    }

    #[test]
    fn divergence_identical_embeddings_hit_the_degenerate_midpoint() {
        let embedder = StubEmbedder::new(5, 16).unwrap();
        let templates = default_templates();
        let img = Tensor::full(&[3, 16, 16], 0.6);
        let renders = vec![(img.clone(), "fire".to_string()), (img, "ice".to_string())];
        let l = divergence_loss(&renders, &embedder, &templates, 1.0, 0).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn divergence_counts_pairs_and_requires_two_styles() {
        let ids = [0usize, 1, 2];
        let pairs = sample_style_pairs(&ids, 1.0, 7).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(matches!(
            sample_style_pairs(&[0, 0, 0], 1.0, 7),
            Err(Error::Config(_))
        ));
        // 80% of 10 pairs of 5 distinct styles -> 8
        let ids5 = [0usize, 1, 2, 3, 4];
        assert_eq!(sample_style_pairs(&ids5, 0.8, 1).unwrap().len(), 8);
    }

    #[test]
    fn divergence_aligned_pair_reaches_zero_and_swap_invariance() {
        let embedder = StubEmbedder::new(6, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.1, 0.9, &mut rng);
        let b = Tensor::rand_uniform(&[3, 16, 16], 0.1, 0.9, &mut rng);
        let ea = embedder.embed_image_tensor(&a).unwrap();
        let eb = embedder.embed_image_tensor(&b).unwrap();
        // style text vectors chosen so delta_t = delta_i exactly
        let style_vecs = vec![ea.clone(), eb.clone()];

        let tape = Tape::new();
        let va = embedder
            .embed_image_any(&tape, tape.constant(a.clone()))
            .unwrap();
        let vb = embedder
            .embed_image_any(&tape, tape.constant(b.clone()))
            .unwrap();
        let (loss, pairs) =
            divergence_loss_var(&tape, &[(va, 0), (vb, 1)], &style_vecs, 1.0, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(tape.item(loss).abs() < 1e-6);

        // swapping the two elements of the pair leaves the value unchanged
        let tape2 = Tape::new();
        let va = embedder.embed_image_any(&tape2, tape2.constant(a)).unwrap();
        let vb = embedder.embed_image_any(&tape2, tape2.constant(b)).unwrap();
        let (loss2, _) =
            divergence_loss_var(&tape2, &[(vb, 1), (va, 0)], &style_vecs, 1.0, 0).unwrap();
        assert!((tape.item(loss) - tape2.item(loss2)).abs() < 1e-12);
    }

    #[test]
    fn content_disparity_identity_and_symmetry() {
        let embedder = StubEmbedder::new(7, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        assert!(content_disparity(&a, &a, &embedder).unwrap().abs() < 1e-12);
        let ab = content_disparity(&a, &b, &embedder).unwrap();
        let ba = content_disparity(&b, &a, &embedder).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=2.0).contains(&ab));
    }

    /// Test-only embedder with hand-prescribed orthogonal image
    /// embeddings.
    struct OrthoEmbedder;
    impl JointEmbedder for OrthoEmbedder {
        fn dim(&self) -> usize {
            8
        }
        fn embed_text(&self, _text: &str) -> Result<Tensor> {
            Ok(unit(8, 0))
        }
        fn embed_image(&self, tape: &Tape, image: Var) -> Result<Var> {
            // bright image -> axis 0, dark image -> axis 1
            let mean = tape.value(image).mean();
            Ok(tape.constant(if mean > 0.5 { unit(8, 0) } else { unit(8, 1) }))
        }
    }

    #[test]
    fn orthogonal_embeddings_give_unit_disparity() {
        let bright = Tensor::full(&[3, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE], 0.9);
        let dark = Tensor::full(&[3, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE], 0.1);
        let cd = content_disparity(&bright, &dark, &OrthoEmbedder).unwrap();
        assert!((cd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_total_is_a_plain_sum() {
        assert!((style_total(0.5, 0.3, 0.1) - 0.7).abs() < 1e-15);
        assert_eq!(style_total(0.0, 0.0, 0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (p, d, c) = (
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
            );
            assert_eq!(style_total(p, d, c), p + d - c);
        }
    }

    #[test]
    fn content_loss_identities_and_recompute() {
        let encoder = crate::encoder::ConvEncoder::from_seed(11, (4, 6, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::rand_uniform(&[3, 16, 16], 0.0, 0.8, &mut rng);
        let (feat, rgb) = content_loss(&a, &a, &encoder).unwrap();
        assert_eq!((feat, rgb), (0.0, 0.0));

        // constant offset -> rgb is exactly the offset
        let b = a.map(|v| v + 0.1);
        let (_, rgb) = content_loss(&b, &a, &encoder).unwrap();
        assert!((rgb - 0.1).abs() < 1e-12);

        // random pair: feat matches an independent two-loop recomputation
        let c = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let (feat, _) = content_loss(&c, &a, &encoder).unwrap();
        let tape = Tape::new();
        let stages_c = encoder
            .encode_stages(&tape, tape.constant(c.clone()))
            .unwrap();
        let stages_a = encoder
            .encode_stages(&tape, tape.constant(a.clone()))
            .unwrap();
        let mut acc = 0.0;
        for (sc, sa) in stages_c.iter().zip(&stages_a) {
            let (vc, va) = (tape.value(*sc), tape.value(*sa));
            let mut stage = 0.0;
            for (x, y) in vc.data().iter().zip(va.data()) {
                stage += (x - y) * (x - y);
            }
            acc += stage / vc.len() as f64;
        }
        acc /= 3.0;
        assert!((feat - acc).abs() < 1e-6, "{feat} vs {acc}");

        // shape mismatch errors
        assert!(matches!(
            content_loss(&Tensor::zeros(&[3, 8, 8]), &a, &encoder),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tv_identities() {
        assert_eq!(tv_loss(&Tensor::full(&[3, 8, 8], 0.42)), 0.0);
        // single vertical step edge of height h on a 4x4 single-channel
        // image: one step per row between columns 1 and 2
        let h = 0.25;
        let mut img = Tensor::zeros(&[1, 4, 4]);
        for r in 0..4 {
            img.set3(0, r, 2, h);
            img.set3(0, r, 3, h);
        }
        // horizontal diffs: 4 rows x 3 diffs, exactly 4 are h^2;
        // vertical diffs: all zero; count = 4*3 + 3*4 = 24
        let expect = 4.0 * h * h / 24.0;
        assert!((tv_loss(&img) - expect).abs() < 1e-12);
    }

    #[test]
    fn gs_on_identical_images_is_degenerate_one() {
        let embedder = StubEmbedder::new(12, 16).unwrap();
        let templates = default_templates();
        let img = Tensor::full(&[3, 16, 16], 0.3);
        let l = gs_loss(&img, &img, "fire", "a Photo", &embedder, &templates).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn all_losses_stay_in_their_ranges() {
        let embedder = StubEmbedder::new(13, 16).unwrap();
        let templates = default_templates();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let a = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
            let l = directional_loss(&a, &b, "fire", "a Photo", &embedder, &templates).unwrap();
            assert!((0.0..=2.0).contains(&l));
            let cd = content_disparity(&a, &b, &embedder).unwrap();
            assert!((0.0..=2.0).contains(&cd));
            assert!(tv_loss(&a) >= 0.0);
            let encoder = crate::encoder::ConvEncoder::from_seed(1, (4, 6, 8));
            let (feat, rgb) = content_loss(&a, &b, &encoder).unwrap();
            assert!(feat >= 0.0 && rgb >= 0.0);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences_on_probe_images() {
        let embedder = StubEmbedder::new(14, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = Tensor::rand_uniform(&[3, 8, 8], 0.05, 0.95, &mut rng);
        let content = Tensor::rand_uniform(&[3, 8, 8], 0.05, 0.95, &mut rng);
        let content_embed = embedder.embed_image_tensor(&content).unwrap();
        let style_vec = embedder.embed_text("fire style").unwrap();
        let source_vec = embedder.embed_text("a Photo").unwrap();
        let encoder = crate::encoder::ConvEncoder::from_seed(2, (4, 6, 8));
        let patch_cfg = PatchConfig {
            n_patches: 3,
            patch_size: 6,
            tau: 0.0,
            distortion: 0.5,
            seed: 3,
        };

        type LossFn<'a> = Box<dyn Fn(&Tape, Var) -> Var + 'a>;
        let losses: Vec<(&str, LossFn)> = vec![
            ("dir", Box::new(|tape: &Tape, img: Var| {
                directional_loss_var(tape, img, &content_embed, &style_vec, &source_vec, &embedder)
                    .unwrap()
            })),
            ("patch", Box::new(|tape: &Tape, img: Var| {
                patch_loss_var(
                    tape,
                    img,
                    &content_embed,
                    &style_vec,
                    &source_vec,
                    &embedder,
                    &patch_cfg,
                )
                .unwrap()
            })),
            ("tv", Box::new(|tape: &Tape, img: Var| tv_loss_var(tape, img))),
            ("feat", Box::new(|tape: &Tape, img: Var| {
                content_loss_var(tape, img, &content, &encoder).unwrap().0
            })),
            ("rgb", Box::new(|tape: &Tape, img: Var| {
                content_loss_var(tape, img, &content, &encoder).unwrap().1
            })),
        ];

        for (name, f) in &losses {
            let tape = Tape::new();
            let img = tape.leaf(probe.clone());
            let loss = f(&tape, img);
            let grads = tape.backward(loss);
            let analytic = grads.get_or_zeros(img, probe.shape());
            let mut func = |x: &Tensor| {
                let t = Tape::new();
                let i = t.leaf(x.clone());
                t.item(f(&t, i))
            };
            let numeric = central_difference(&mut func, &probe, 1e-6);
            for (idx, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
                if a.abs() < 1e-7 && n.abs() < 1e-7 {
                    continue;
                }
                let scale = a.abs().max(n.abs());
                assert!(
                    (a - n).abs() / scale < 1e-3,
                    "{name}[{idx}]: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn loss_report_consistency_check() {
        let good = LossReport {
            patch: 0.5,
            dir: 0.3,
            cd: 0.1,
            feat: 0.2,
            rgb: 0.05,
            tv: 0.0,
            gs: 0.4,
            total_style: 0.7,
            total_content: 0.2 + 0.05 * 5e-3,
            weighted_total: 1.0,
        };
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.total_style = 0.9;
        assert!(bad.validate().is_err());
    }
}
