//! Two-stage training.
//!
//! Stage 1 fits the decoder alone on reconstruction (render the unstylized
//! feature cloud against held ground-truth views). Stage 2 freezes the
//! decoder and trains the style transformation on the full objective:
//!
//!   total = lambda_s * (L_patch + L_div - L_cd) + lambda_gs * L_gs
//!         + lambda_feat * L_feat + lambda_rgb * L_rgb + lambda_tv * L_tv
//!
//! Batches hold `batch_size` distinct views of one scene (scenes round-
//! robin across steps) with styles drawn without replacement until the
//! pool is exhausted. All randomness comes from one seeded stream plus
//! per-step derived seeds, so a fixed seed reproduces checkpoints
//! bit-identically and a resumed run continues the exact trajectory.

use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cloud::{build_feature_cloud, Dedup, FeaturePointCloud};
use crate::encoder::{ConvEncoder, ImageEncoder};
use crate::error::{Error, Result};
use crate::losses::{
    content_loss_var, cosine_direction_loss_var, divergence_loss_var, patch_loss_var,
    sample_style_pairs, tv_loss_var, LossReport, LossWeights, PatchConfig,
};
use crate::render::{decode_var, splat_table, Decoder, DecoderConfig, SplatConfig, SplatTable};
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::text::{
    default_templates, embed_style, ExportEmbedder, JointEmbedder, StubEmbedder, StyleEmbedding,
};
use crate::transform::{apply_style_var, StylizedCloud, TransformConfig, TransformMode, TransformState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Embedder selector: `stub:SEED` or `export:PATH`.
pub fn build_embedder(spec: &str, embed_dim: usize) -> Result<Box<dyn JointEmbedder>> {
    if let Some(seed) = spec.strip_prefix("stub:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Config(format!("bad stub seed in embedder spec {spec:?}")))?;
        return Ok(Box::new(StubEmbedder::new(seed, embed_dim)?));
    }
    if let Some(path) = spec.strip_prefix("export:") {
        let e = ExportEmbedder::load(Path::new(path))?;
        if e.dim() != embed_dim {
            return Err(Error::Config(format!(
                "exported embedder width {} does not match configured {embed_dim}",
                e.dim()
            )));
        }
        return Ok(Box::new(e));
    }
    Err(Error::Config(format!(
        "embedder spec must be stub:SEED or export:PATH, got {spec:?}"
    )))
}

/// Full training configuration. Defaults are desk scale; the paper
/// reference values are batch 4, lr 1e-4, betas (0.9, 0.9999),
/// lambdas (rgb 5e-3, feat 1, s 15, tv 1.3e-6), 64 patches of size 96,
/// tau 0.7, 80% pair sampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub encoder_channels: [usize; 3],
    pub transform: TransformConfig,
    pub decoder_base: usize,
    pub splat: SplatConfig,
    pub patch: PatchConfig,
    pub pair_fraction: f64,
    pub source_text: String,
    pub styles: Vec<String>,
    /// Scene directories consumed by the CLI train command.
    pub scenes: Vec<String>,
    /// Voxel size for merging per-view clouds; None picks
    /// bounding-box-diagonal / 256; set `dedup_off` to skip merging.
    pub voxel: Option<f64>,
    pub dedup_off: bool,
    pub freeze_decoder_stage2: bool,
    pub with_global: bool,
    pub divergence_enabled: bool,
    pub embedder: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-8,
            stage1_steps: 200,
            stage2_steps: 100,
            seed: 0,
            weights: LossWeights::default(),
            encoder_channels: [16, 24, 32],
            transform: TransformConfig::default(),
            decoder_base: 16,
            splat: SplatConfig::default(),
            patch: PatchConfig::default(),
            pair_fraction: 0.8,
            source_text: "a Photo".to_string(),
            styles: vec![],
            scenes: vec![],
            voxel: None,
            dedup_off: false,
            freeze_decoder_stage2: true,
            with_global: true,
            divergence_enabled: true,
            embedder: "stub:0".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.weights.validate()?;
        self.splat.validate()?;
        if self.encoder_channels[2] != self.transform.feature_dim {
            return Err(Error::Config(format!(
                "encoder output {} must match transform feature_dim {}",
                self.encoder_channels[2], self.transform.feature_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(Error::Config("pair_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn dedup(&self) -> Dedup {
        if self.dedup_off {
            Dedup::Off
        } else {
            match self.voxel {
                Some(v) => Dedup::Voxel(v),
                None => Dedup::Auto,
            }
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            feature_dim: self.transform.feature_dim,
            base: self.decoder_base,
            stride: self.splat.stride,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

// ---- optimizer ----

/// Adam with bias correction; moment buffers are part of the checkpoint so
/// a resumed run continues exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self::new(lr, beta1, beta2, eps, &shapes)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    fn entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}.t"), Tensor::scalar(self.t as f64))];
        for (i, m) in self.m.iter().enumerate() {
            out.push((format!("{prefix}.m.{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            out.push((format!("{prefix}.v.{i}"), v.clone()));
        }
        out
    }

    fn from_entries(
        prefix: &str,
        entries: &[(String, Tensor)],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        count: usize,
    ) -> Result<Self> {
        let t = crate::serialize::find(entries, &format!("{prefix}.t"))?.item() as u64;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for i in 0..count {
            m.push(crate::serialize::find(entries, &format!("{prefix}.m.{i}"))?.clone());
            v.push(crate::serialize::find(entries, &format!("{prefix}.v.{i}"))?.clone());
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        })
    }
}

// ---- checkpoint ----

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: u8,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub encoder: ConvEncoder,
    pub decoder: Decoder,
    pub transform: TransformState,
    pub adam_decoder: Adam,
    pub adam_transform: Adam,
}

impl Checkpoint {
    /// Fresh initialization from a config: encoder, decoder and transform
    /// are seeded from `config.seed`-derived streams.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ConvEncoder::from_seed(
            mix(config.seed, 1),
            (
                config.encoder_channels[0],
                config.encoder_channels[1],
                config.encoder_channels[2],
            ),
        );
        let decoder = Decoder::new(config.decoder_config(), mix(config.seed, 2));
        let transform = TransformState::new(config.transform.clone(), mix(config.seed, 3));
        let rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 4));
        let adam_decoder = Adam::for_params(
            config.lr,
            config.beta1,
            config.beta2,
            config.eps,
            decoder.params(),
        );
        let adam_transform = Adam::for_params(
            config.lr,
            config.beta1,
            config.beta2,
            config.eps,
            transform.params(),
        );
        Ok(Self {
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            config,
            stage: 0,
            step: 0,
            encoder,
            decoder,
            transform,
            adam_decoder,
            adam_transform,
        })
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let mut entries = self.encoder.entries();
        entries.extend(self.decoder.entries());
        entries.extend(self.transform.entries());
        entries.extend(self.adam_decoder.entries("adam.decoder"));
        entries.extend(self.adam_transform.entries("adam.transform"));
        out.extend_from_slice(&crate::serialize::bundle_to_bytes(&entries));
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fmt = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 65 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt("bad checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported checkpoint version {version}")));
        }
        let stage = bytes[8];
        let step = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let rng_seed: [u8; 32] = bytes[17..49].try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(bytes[49..65].try_into().unwrap());
        let config_len = u32::from_le_bytes(bytes[65..69].try_into().unwrap()) as usize;
        let config: TrainConfig = serde_json::from_slice(&bytes[69..69 + config_len])?;
        let (entries, _) = crate::serialize::bundle_from_bytes(&bytes[69 + config_len..])?;
        let encoder = ConvEncoder::from_entries(&entries)?;
        let decoder = Decoder::from_entries(config.decoder_config(), &entries)?;
        let transform = TransformState::from_entries(config.transform.clone(), &entries)?;
        let adam_decoder = Adam::from_entries(
            "adam.decoder",
            &entries,
            config.lr,
            config.beta1,
            config.beta2,
            config.eps,
            decoder.params().len(),
        )?;
        let adam_transform = Adam::from_entries(
            "adam.transform",
            &entries,
            config.lr,
            config.beta1,
            config.beta2,
            config.eps,
            transform.params().len(),
        )?;
        Ok(Self {
            config,
            stage,
            step,
            rng_seed,
            rng_word_pos,
            encoder,
            decoder,
            transform,
            adam_decoder,
            adam_transform,
        })
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: u8,
    pub elapsed_s: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Feature clouds and per-view splat geometry, computed once per scene.
struct SceneCache {
    clouds: Vec<FeaturePointCloud>,
    tables: Vec<Vec<SplatTable>>,
    content_embeds: Vec<Vec<Tensor>>,
}

fn precompute(
    scenes: &[Scene],
    encoder: &ConvEncoder,
    config: &TrainConfig,
    embedder: &dyn JointEmbedder,
) -> Result<SceneCache> {
    let mut clouds = Vec::with_capacity(scenes.len());
    let mut tables = Vec::with_capacity(scenes.len());
    let mut content_embeds = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let cloud = build_feature_cloud(scene, encoder, config.dedup())?;
        let mut scene_tables = Vec::with_capacity(scene.views.len());
        let mut embeds = Vec::with_capacity(scene.views.len());
        for view in &scene.views {
            let grid = view.intrinsics.scaled_down(config.splat.stride);
            scene_tables.push(splat_table(
                &cloud.positions,
                &grid,
                &view.pose,
                &config.splat,
            )?);
            embeds.push(embedder.embed_image_tensor(&view.image)?);
        }
        clouds.push(cloud);
        tables.push(scene_tables);
        content_embeds.push(embeds);
    }
    Ok(SceneCache {
        clouds,
        tables,
        content_embeds,
    })
}

/// Distinct view indices for one batch (shuffled, cycling when the batch
/// is larger than the view count).
fn sample_views(rng: &mut ChaCha8Rng, n_views: usize, batch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_views).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    (0..batch).map(|i| order[i % n_views]).collect()
}

/// Styles without replacement from a shuffled pool, refilled on
/// exhaustion; batches are nudged to hold at least two distinct styles.
fn sample_styles(
    rng: &mut ChaCha8Rng,
    pool: &mut Vec<usize>,
    n_styles: usize,
    batch: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        if pool.is_empty() {
            let mut refill: Vec<usize> = (0..n_styles).collect();
            for i in (1..refill.len()).rev() {
                let j = rng.gen_range(0..=i);
                refill.swap(i, j);
            }
            *pool = refill;
        }
        out.push(pool.pop().expect("refilled pool"));
    }
    if n_styles >= 2 && out.iter().all(|&s| s == out[0]) {
        let last = out.last_mut().expect("batch is non-empty");
        *last = (*last + 1) % n_styles;
    }
    out
}

// ---- stage 1 ----

/// Reconstruction-only decoder training; returns the advanced checkpoint
/// and the per-step loss log.
pub fn train_decoder(
    scenes: &[Scene],
    mut ckpt: Checkpoint,
    steps: usize,
) -> Result<(Checkpoint, Vec<LogRecord>)> {
    if scenes.is_empty() {
        return Err(Error::Config("stage 1 needs at least one scene".into()));
    }
    for scene in scenes {
        scene.validate()?;
    }
    let config = ckpt.config.clone();
    let embedder = build_embedder(&config.embedder, config.transform.embed_dim)?;
    let cache = precompute(scenes, &ckpt.encoder, &config, embedder.as_ref())?;
    let mut rng = ckpt.rng();
    let start = Instant::now();
    let mut log = Vec::with_capacity(steps);

    for local_step in 0..steps {
        let step = ckpt.step + local_step as u64;
        let scene_idx = (step as usize) % scenes.len();
        let scene = &scenes[scene_idx];
        let views = sample_views(&mut rng, scene.views.len(), config.batch_size);

        let tape = Tape::new();
        let dec_vars = ckpt.decoder.leaf_params(&tape);
        let features = tape.constant(cache.clouds[scene_idx].features.clone());
        let mut feat_acc: Option<Var> = None;
        let mut rgb_acc: Option<Var> = None;
        for &vi in &views {
            let table = &cache.tables[scene_idx][vi];
            let map = tape.scatter_weighted(features, std::rc::Rc::clone(&table.entries), table.hw);
            let rendered = decode_var(&tape, map, &table.mask, &dec_vars, &ckpt.decoder.config)?;
            let (feat, rgb) =
                content_loss_var(&tape, rendered, &scene.views[vi].image, &ckpt.encoder)?;
            feat_acc = Some(match feat_acc {
                Some(a) => tape.add(a, feat),
                None => feat,
            });
            rgb_acc = Some(match rgb_acc {
                Some(a) => tape.add(a, rgb),
                None => rgb,
            });
        }
        let inv = 1.0 / views.len() as f64;
        let feat = tape.scale(feat_acc.expect("batch"), inv);
        let rgb = tape.scale(rgb_acc.expect("batch"), inv);
        let total = tape.add(
            tape.scale(feat, config.weights.lambda_feat),
            tape.scale(rgb, config.weights.lambda_rgb),
        );
        let grads = tape.backward(total);
        let grad_tensors: Vec<Tensor> = dec_vars
            .vars
            .iter()
            .zip(ckpt.decoder.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        ckpt.adam_decoder
            .step(ckpt.decoder.params_mut(), &grad_tensors);

        let (feat_v, rgb_v) = (tape.item(feat), tape.item(rgb));
        let total_content =
            config.weights.lambda_feat * feat_v + config.weights.lambda_rgb * rgb_v;
        let report = LossReport {
            patch: 0.0,
            dir: 0.0,
            cd: 0.0,
            feat: feat_v,
            rgb: rgb_v,
            tv: 0.0,
            gs: 0.0,
            total_style: 0.0,
            total_content,
            weighted_total: total_content,
        };
        report.validate()?;
        log.push(LogRecord {
            step,
            stage: 1,
            elapsed_s: start.elapsed().as_secs_f64(),
            report,
        });
    }

    ckpt.step += steps as u64;
    ckpt.stage = 1;
    ckpt.rng_word_pos = rng.get_word_pos();
    Ok((ckpt, log))
}

// ---- stage 2 ----

/// Style-transformation training on the full objective; the decoder stays
/// frozen unless `freeze_decoder_stage2` is unset.
pub fn train_style(
    scenes: &[Scene],
    mut ckpt: Checkpoint,
    steps: usize,
) -> Result<(Checkpoint, Vec<LogRecord>)> {
    if scenes.is_empty() {
        return Err(Error::Config("stage 2 needs at least one scene".into()));
    }
    let config = ckpt.config.clone();
    if config.styles.len() < 2 {
        return Err(Error::Config(format!(
            "stage 2 needs at least 2 styles, got {}",
            config.styles.len()
        )));
    }
    if config.batch_size < 2 {
        return Err(Error::Config(
            "stage 2 needs batch_size >= 2 for the divergence pairs".into(),
        ));
    }
    let embedder = build_embedder(&config.embedder, config.transform.embed_dim)?;
    let templates = default_templates();
    let style_embeddings: Vec<StyleEmbedding> = config
        .styles
        .iter()
        .map(|s| embed_style(s, embedder.as_ref(), &templates))
        .collect::<Result<_>>()?;
    let source_vec =
        crate::text::style_text_vector(&config.source_text, embedder.as_ref(), &templates)?;
    let style_text_vecs: Vec<Tensor> = style_embeddings.iter().map(|s| s.mean.clone()).collect();

    let cache = precompute(scenes, &ckpt.encoder, &config, embedder.as_ref())?;
    let mut rng = ckpt.rng();
    let mut style_pool: Vec<usize> = Vec::new();
    let start = Instant::now();
    let mut log = Vec::with_capacity(steps);
    let freeze = config.freeze_decoder_stage2;

    for local_step in 0..steps {
        let step = ckpt.step + local_step as u64;
        let scene_idx = (step as usize) % scenes.len();
        let scene = &scenes[scene_idx];
        let views = sample_views(&mut rng, scene.views.len(), config.batch_size);
        let styles = sample_styles(&mut rng, &mut style_pool, config.styles.len(), config.batch_size);

        let tape = Tape::new();
        let t_vars = ckpt.transform.leaf_params(&tape);
        let dec_vars = ckpt.decoder.leaf_params(&tape);
        let features = tape.constant(cache.clouds[scene_idx].features.clone());

        let mut renders: Vec<Var> = Vec::with_capacity(views.len());
        let mut embeds: Vec<(Var, usize)> = Vec::with_capacity(views.len());
        let mut patch_acc: Option<Var> = None;
        let mut gs_acc: Option<Var> = None;
        let mut feat_acc: Option<Var> = None;
        let mut rgb_acc: Option<Var> = None;
        let mut tv_acc: Option<Var> = None;

        for (i, (&vi, &si)) in views.iter().zip(&styles).enumerate() {
            let style_vectors = tape.constant(style_embeddings[si].vectors.clone());
            let (stylized, _, _, _) = apply_style_var(
                &tape,
                features,
                style_vectors,
                &t_vars,
                &config.transform,
                &TransformMode::Learned,
                config.with_global,
            )?;
            let table = &cache.tables[scene_idx][vi];
            let map = tape.scatter_weighted(stylized, std::rc::Rc::clone(&table.entries), table.hw);
            let rendered = decode_var(&tape, map, &table.mask, &dec_vars, &ckpt.decoder.config)?;
            renders.push(rendered);

            let e_render = embedder.embed_image_any(&tape, rendered)?;
            embeds.push((e_render, si));

            let content_embed = &cache.content_embeds[scene_idx][vi];
            let mut patch_cfg = config.patch.clone();
            patch_cfg.seed = mix(config.seed, step.wrapping_mul(131).wrapping_add(i as u64));
            let patch = patch_loss_var(
                &tape,
                rendered,
                content_embed,
                &style_text_vecs[si],
                &source_vec,
                embedder.as_ref(),
                &patch_cfg,
            )?;
            let delta_t = style_text_vecs[si].sub(&source_vec);
            let delta_i = tape.sub(e_render, tape.constant(content_embed.clone()));
            let gs = cosine_direction_loss_var(&tape, delta_i, &delta_t);
            let (feat, rgb) =
                content_loss_var(&tape, rendered, &scene.views[vi].image, &ckpt.encoder)?;
            let tv = tv_loss_var(&tape, rendered);

            let join = |acc: Option<Var>, v: Var| {
                Some(match acc {
                    Some(a) => tape.add(a, v),
                    None => v,
                })
            };
            patch_acc = join(patch_acc, patch);
            gs_acc = join(gs_acc, gs);
            feat_acc = join(feat_acc, feat);
            rgb_acc = join(rgb_acc, rgb);
            tv_acc = join(tv_acc, tv);
        }

        let inv = 1.0 / views.len() as f64;
        let patch = tape.scale(patch_acc.expect("batch"), inv);
        let gs = tape.scale(gs_acc.expect("batch"), inv);
        let feat = tape.scale(feat_acc.expect("batch"), inv);
        let rgb = tape.scale(rgb_acc.expect("batch"), inv);
        let tv = tape.scale(tv_acc.expect("batch"), inv);

        // divergence over different-style pairs in the batch, with the
        // content disparity of the same pairs subtracted (Eq. 5/6)
        let div_seed = mix(config.seed, step.wrapping_mul(977));
        let (dir, cd_value) = if config.divergence_enabled {
            let (dir, pairs) = divergence_loss_var(
                &tape,
                &embeds,
                &style_text_vecs,
                config.pair_fraction,
                div_seed,
            )?;
            let mut cd = 0.0;
            for &(i, j) in &pairs {
                let a = &cache.content_embeds[scene_idx][views[i]];
                let b = &cache.content_embeds[scene_idx][views[j]];
                let (na, nb) = (a.l2_norm(), b.l2_norm());
                cd += if na < crate::losses::EPS_NORM || nb < crate::losses::EPS_NORM {
                    1.0
                } else {
                    1.0 - a.mul(b).sum() / (na * nb)
                };
            }
            (dir, cd / pairs.len() as f64)
        } else {
            (tape.scalar(0.0), 0.0)
        };

        // weighted objective; cd is constant w.r.t. parameters
        let style_part = tape.add(patch, dir);
        let mut total = tape.scale(style_part, config.weights.lambda_s);
        total = tape.add(total, tape.scale(gs, config.weights.gs_weight()));
        total = tape.add(total, tape.scale(feat, config.weights.lambda_feat));
        total = tape.add(total, tape.scale(rgb, config.weights.lambda_rgb));
        total = tape.add(total, tape.scale(tv, config.weights.lambda_tv));

        let grads = tape.backward(total);
        let t_grads: Vec<Tensor> = t_vars
            .vars
            .iter()
            .zip(ckpt.transform.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        ckpt.adam_transform
            .step(ckpt.transform.params_mut(), &t_grads);
        if !freeze {
            let d_grads: Vec<Tensor> = dec_vars
                .vars
                .iter()
                .zip(ckpt.decoder.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            ckpt.adam_decoder.step(ckpt.decoder.params_mut(), &d_grads);
        }

        let (patch_v, dir_v, gs_v) = (tape.item(patch), tape.item(dir), tape.item(gs));
        let (feat_v, rgb_v, tv_v) = (tape.item(feat), tape.item(rgb), tape.item(tv));
        let total_style = patch_v + dir_v - cd_value;
        let total_content =
            config.weights.lambda_feat * feat_v + config.weights.lambda_rgb * rgb_v;
        let report = LossReport {
            patch: patch_v,
            dir: dir_v,
            cd: cd_value,
            feat: feat_v,
            rgb: rgb_v,
            tv: tv_v,
            gs: gs_v,
            total_style,
            total_content,
            weighted_total: config.weights.lambda_s * total_style
                + config.weights.gs_weight() * gs_v
                + total_content
                + config.weights.lambda_tv * tv_v,
        };
        report.validate()?;
        log.push(LogRecord {
            step,
            stage: 2,
            elapsed_s: start.elapsed().as_secs_f64(),
            report,
        });
    }

    ckpt.step += steps as u64;
    ckpt.stage = 2;
    ckpt.rng_word_pos = rng.get_word_pos();
    Ok((ckpt, log))
}

// ---- inference ----

/// Deterministic inference composition on a prebuilt cloud.
pub fn stylize_cloud(
    cloud: &FeaturePointCloud,
    style_text: &str,
    ckpt: &Checkpoint,
) -> Result<StylizedCloud> {
    let embedder = build_embedder(&ckpt.config.embedder, ckpt.config.transform.embed_dim)?;
    let templates = default_templates();
    let style = embed_style(style_text, embedder.as_ref(), &templates)?;
    crate::transform::apply_style(
        cloud,
        &style,
        &ckpt.transform,
        &crate::transform::StyleOptions {
            mode: TransformMode::Learned,
            with_global: ckpt.config.with_global,
        },
    )
}

/// Build the feature cloud of a scene (works on scenes never seen in
/// training) and stylize it.
pub fn stylize_scene(
    scene: &Scene,
    style_text: &str,
    ckpt: &Checkpoint,
) -> Result<StylizedCloud> {
    let cloud = build_feature_cloud(scene, &ckpt.encoder, ckpt.config.dedup())?;
    stylize_cloud(&cloud, style_text, ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{make_synthetic_scene, SyntheticSpec, TextureId};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            lr: 1e-3,
            stage1_steps: 4,
            stage2_steps: 3,
            seed: 11,
            encoder_channels: [4, 6, 8],
            transform: TransformConfig {
                feature_dim: 8,
                compressed_dim: 4,
                embed_dim: 16,
                global_mid: 8,
            },
            decoder_base: 4,
            patch: PatchConfig {
                n_patches: 2,
                patch_size: 12,
                tau: 0.7,
                distortion: 0.5,
                seed: 0,
            },
            styles: vec!["fire".into(), "ice".into()],
            embedder: "stub:5".into(),
            dedup_off: true,
            ..TrainConfig::default()
        }
    }

    fn tiny_scene(seed: u64) -> Scene {
        make_synthetic_scene(
            &SyntheticSpec {
                n_views: 3,
                n_points: 50,
                texture: TextureId::Checker,
                image_size: 32,
            },
            seed,
        )
        .unwrap()
        .scene
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ckpt = Checkpoint::init(tiny_config()).unwrap();
        let scene = tiny_scene(1);
        let (out, log) = train_decoder(&[scene], ckpt.clone(), 0).unwrap();
        assert!(log.is_empty());
        assert_eq!(out.decoder, ckpt.decoder);
        assert_eq!(out.step, 0);
    }

    #[test]
    fn empty_scene_list_is_a_config_error() {
        let ckpt = Checkpoint::init(tiny_config()).unwrap();
        assert!(matches!(
            train_decoder(&[], ckpt, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage1_is_deterministic_and_decreases_loss_locally() {
        let scene = tiny_scene(2);
        let ckpt = Checkpoint::init(tiny_config()).unwrap();
        let (a, log_a) = train_decoder(&[scene.clone()], ckpt.clone(), 4).unwrap();
        let (b, log_b) = train_decoder(&[scene], ckpt, 4).unwrap();
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.rng_word_pos, b.rng_word_pos);
        for (ra, rb) in log_a.iter().zip(&log_b) {
            assert_eq!(ra.report.weighted_total, rb.report.weighted_total);
        }
    }

    #[test]
    fn single_style_stage2_is_rejected() {
        let mut config = tiny_config();
        config.styles = vec!["fire".into()];
        let ckpt = Checkpoint::init(config).unwrap();
        assert!(matches!(
            train_style(&[tiny_scene(1)], ckpt, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stage2_freezes_the_decoder_and_moves_the_transform() {
        let scene = tiny_scene(3);
        let ckpt = Checkpoint::init(tiny_config()).unwrap();
        let (ckpt, _) = train_decoder(&[scene.clone()], ckpt, 2).unwrap();
        let decoder_before = ckpt.decoder.clone();
        let transform_before = ckpt.transform.clone();
        let (after, log) = train_style(&[scene], ckpt, 3).unwrap();
        assert_eq!(after.decoder, decoder_before, "decoder must stay frozen");
        assert_ne!(after.transform, transform_before, "transform must move");
        for rec in &log {
            rec.report.validate().unwrap();
            let w = &after.config.weights;
            let recombined = w.lambda_s * rec.report.total_style
                + w.gs_weight() * rec.report.gs
                + rec.report.total_content
                + w.lambda_tv * rec.report.tv;
            assert!((rec.report.weighted_total - recombined).abs() < 1e-6);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let scene = tiny_scene(4);
        let init = Checkpoint::init(tiny_config()).unwrap();
        let (full, _) = train_decoder(&[scene.clone()], init.clone(), 4).unwrap();

        let (half, _) = train_decoder(&[scene.clone()], init, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.psck");
        half.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();
        let (resumed, _) = train_decoder(&[scene], restored, 2).unwrap();

        assert_eq!(resumed.decoder, full.decoder);
        assert_eq!(resumed.step, full.step);
        assert_eq!(resumed.rng_word_pos, full.rng_word_pos);
    }

    #[test]
    fn zero_style_weights_match_structurally_disabled_style_losses() {
        let scene = tiny_scene(5);
        let mut config = tiny_config();
        config.weights.lambda_s = 0.0;
        config.weights.lambda_gs = Some(0.0);
        let ckpt = Checkpoint::init(config.clone()).unwrap();
        let (ckpt, _) = train_decoder(&[scene.clone()], ckpt, 1).unwrap();

        let (with_style_terms, _) = train_style(&[scene.clone()], ckpt.clone(), 2).unwrap();
        let mut ckpt_no_div = ckpt.clone();
        ckpt_no_div.config.divergence_enabled = false;
        let (without, _) = train_style(&[scene], ckpt_no_div, 2).unwrap();
        // zero-weighted style losses contribute exactly zero gradient
        assert_eq!(with_style_terms.transform, without.transform);
    }

    #[test]
    fn stylize_scene_runs_on_unseen_scenes_and_preserves_positions() {
        let train_scene = tiny_scene(6);
        let ckpt = Checkpoint::init(tiny_config()).unwrap();
        let (ckpt, _) = train_decoder(&[train_scene.clone()], ckpt, 2).unwrap();
        let (ckpt, _) = train_style(&[train_scene], ckpt, 2).unwrap();

        let holdout = tiny_scene(99);
        let cloud = build_feature_cloud(&holdout, &ckpt.encoder, ckpt.config.dedup()).unwrap();
        let a = stylize_cloud(&cloud, "fire", &ckpt).unwrap();
        let b = stylize_cloud(&cloud, "fire", &ckpt).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.positions, cloud.positions);
        let c = stylize_cloud(&cloud, "ice", &ckpt).unwrap();
        assert!(a.features.max_abs_diff(&c.features) > 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let ckpt = Checkpoint::init(tiny_config()).unwrap();
        let (ckpt, _) = train_decoder(&[tiny_scene(7)], ckpt, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.psck");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.decoder, ckpt.decoder);
        assert_eq!(back.transform, ckpt.transform);
        assert_eq!(back.encoder, ckpt.encoder);
        assert_eq!(back.adam_decoder, ckpt.adam_decoder);
        assert_eq!(back.rng_seed, ckpt.rng_seed);
        assert_eq!(back.rng_word_pos, ckpt.rng_word_pos);
        assert_eq!(back.step, ckpt.step);
    }

    #[test]
    fn config_toml_roundtrip_rejects_unknown_keys() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        config.save(&path).unwrap();
        let back = TrainConfig::load(&path).unwrap();
        assert_eq!(back.styles, config.styles);
        assert_eq!(back.lr, config.lr);

        std::fs::write(&path, "unknown_key = 3\n").unwrap();
        assert!(matches!(TrainConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn style_pool_always_has_two_distinct_styles_per_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = Vec::new();
        for _ in 0..200 {
            let batch = sample_styles(&mut rng, &mut pool, 2, 4);
            assert_eq!(batch.len(), 4);
            let distinct = batch.iter().collect::<std::collections::BTreeSet<_>>();
            assert!(distinct.len() >= 2, "batch {batch:?} collapsed to one style");
        }
    }

    #[test]
    fn adam_moves_toward_a_quadratic_minimum() {
        let mut params = vec![Tensor::new(&[2], vec![5.0, -3.0])];
        let mut adam = Adam::for_params(0.1, 0.9, 0.9999, 1e-8, &params);
        for _ in 0..500 {
            let grads = vec![params[0].scale(2.0)]; // d/dx of x^2
            adam.step(&mut params, &grads);
        }
        assert!(params[0].max_abs() < 0.05, "{:?}", params[0].data());
    }
}
