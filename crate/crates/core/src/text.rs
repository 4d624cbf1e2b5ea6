//! Text styles: template expansion and pluggable joint image-text
//! embedding.
//!
//! A style phrase is expanded into the shipped prompt-template list and
//! embedded prompt by prompt; the column mean is the style vector used by
//! the transform and the directional losses. The [`StubEmbedder`] makes the
//! whole pipeline runnable offline: text embeds by seeded hashing, images
//! by a fixed random projection of a soft 64-bin color histogram, so image
//! embeddings stay differentiable.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input resolution of the joint embedder; callers resize before embedding.
pub const CLIP_IMAGE_SIZE: usize = 224;

/// Source text of the directional losses.
pub const SOURCE_TEXT: &str = "a Photo";

/// Reference embedding width.
pub const REFERENCE_EMBED_DIM: usize = 512;

const TEMPLATES: &str = include_str!("templates.txt");

/// The shipped prompt-template list (79 entries, `{}` placeholder).
pub fn default_templates() -> Vec<String> {
    TEMPLATES.lines().map(str::to_string).collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Replace the placeholder of each template with the style text.
pub fn expand_templates(style_text: &str, templates: &[String]) -> Result<Vec<String>> {
    templates
        .iter()
        .map(|t| {
            if t.matches("{}").count() != 1 {
                return Err(Error::Template(format!(
                    "template must contain exactly one '{{}}': {t:?}"
                )));
            }
            Ok(t.replacen("{}", style_text, 1))
        })
        .collect()
}

pub trait JointEmbedder {
    /// Embedding width E.
    fn dim(&self) -> usize;
    /// Deterministic text embedding, `[E]`.
    fn embed_text(&self, text: &str) -> Result<Tensor>;
    /// Differentiable image embedding of a `[3, 224, 224]` image var.
    fn embed_image(&self, tape: &Tape, image: Var) -> Result<Var>;

    /// Resize any `[3, H, W]` image var to 224x224 and embed it.
    fn embed_image_any(&self, tape: &Tape, image: Var) -> Result<Var> {
        let shape = tape.shape(image);
        let resized = if shape[1] == CLIP_IMAGE_SIZE && shape[2] == CLIP_IMAGE_SIZE {
            image
        } else {
            tape.resize_bilinear(image, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE)
        };
        self.embed_image(tape, resized)
    }

    /// Non-differentiable convenience: embed a plain image tensor.
    fn embed_image_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        let e = self.embed_image_any(&tape, x)?;
        Ok(tape.value(e))
    }
}

/// Text-prompt embeddings of one style: M template expansions, their
/// vectors and the exact column mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleEmbedding {
    pub style_text: String,
    pub prompts: Vec<String>,
    #[serde(with = "tensor_rows")]
    pub vectors: Tensor,
    #[serde(with = "tensor_vec")]
    pub mean: Tensor,
}

impl StyleEmbedding {
    pub fn template_count(&self) -> usize {
        self.prompts.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Embed a style phrase through every template.
pub fn embed_style(
    style_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
) -> Result<StyleEmbedding> {
    let prompts = expand_templates(style_text, templates)?;
    if prompts.is_empty() {
        return Err(Error::Template("template list is empty".into()));
    }
    let e = embedder.dim();
    let mut data = Vec::with_capacity(prompts.len() * e);
    for prompt in &prompts {
        let v = embedder.embed_text(prompt)?;
        data.extend_from_slice(v.data());
    }
    let vectors = Tensor::new(&[prompts.len(), e], data);
    let mean = vectors.mean_rows();
    Ok(StyleEmbedding {
        style_text: style_text.to_string(),
        prompts,
        vectors,
        mean,
    })
}

/// Mean text embedding over the default templates; the per-style text
/// vector used by the directional losses.
pub fn style_text_vector(
    style_text: &str,
    embedder: &dyn JointEmbedder,
    templates: &[String],
) -> Result<Tensor> {
    Ok(embed_style(style_text, embedder, templates)?.mean)
}

// ---- stub embedder ----

/// Deterministic offline embedder: unit-norm seeded hash per token
/// sequence for text; unit-norm fixed random projection of a soft
/// trilinear 4x4x4 color histogram for images.
pub struct StubEmbedder {
    seed: u64,
    e: usize,
    projection: Tensor, // [E, 64]
}

impl StubEmbedder {
    pub fn new(seed: u64, e: usize) -> Result<Self> {
        if e < 8 {
            return Err(Error::Parameter(format!(
                "stub embedder width must be at least 8, got {e}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d5c_7a1b_3f2e_6d41);
        let projection = Tensor::rand_normal(&[e, 64], 1.0, &mut rng);
        Ok(Self {
            seed,
            e,
            projection,
        })
    }

    /// The fixed histogram-to-embedding map; tests use it to construct
    /// images with prescribed embeddings.
    pub fn projection(&self) -> &Tensor {
        &self.projection
    }
}

impl JointEmbedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.e
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        for token in text.split_whitespace() {
            hasher.update(token.as_bytes());
            hasher.update([0x1f]);
        }
        let state: [u8; 32] = hasher.finalize().into();
        let mut values = Vec::with_capacity(self.e);
        let mut counter = 0u64;
        while values.len() < self.e {
            let mut h = Sha256::new();
            h.update(state);
            h.update(counter.to_le_bytes());
            let block: [u8; 32] = h.finalize().into();
            for chunk in block.chunks_exact(8) {
                if values.len() == self.e {
                    break;
                }
                let u = u64::from_le_bytes(chunk.try_into().unwrap());
                values.push((u >> 11) as f64 / (1u64 << 52) as f64 - 1.0);
            }
            counter += 1;
        }
        let mut t = Tensor::new(&[self.e], values);
        let norm = t.l2_norm();
        if norm > 0.0 {
            t = t.scale(1.0 / norm);
        }
        Ok(t)
    }

    fn embed_image(&self, tape: &Tape, image: Var) -> Result<Var> {
        let shape = tape.shape(image);
        if shape != [3, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE] {
            return Err(Error::ShapeMismatch {
                expected: format!("[3, {CLIP_IMAGE_SIZE}, {CLIP_IMAGE_SIZE}]"),
                got: format!("{shape:?}"),
            });
        }
        let hist = tape.soft_histogram_rgb(image, 4);
        let row = tape.reshape(hist, &[1, 64]);
        let proj = tape.constant(self.projection.clone());
        let out = tape.reshape(tape.matmul(row, tape.transpose(proj)), &[self.e]);
        // unit length; the tiny floor only guards the exact-zero histogram
        let sq = tape.sum(tape.square(out));
        let norm = tape.sqrt(tape.add_scalar(sq, 1e-30));
        Ok(tape.scale_var(out, tape.recip(norm)))
    }
}

// ---- exported-encoder adapter ----

/// Adapter over externally exported encoders: a prompt-to-vector table for
/// text plus a small linear image head applied to a bilinear 8x8 downsample.
/// Directory layout: `meta.json`, `text_embeddings.json`, `image_head.json`.
pub struct ExportEmbedder {
    dim: usize,
    text: std::collections::BTreeMap<String, Vec<f64>>,
    weight: Tensor, // [E, 192]
    bias: Tensor,   // [E]
}

#[derive(Serialize, Deserialize)]
struct ExportMeta {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ExportImageHead {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ExportEmbedder {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ExportMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let text: std::collections::BTreeMap<String, Vec<f64>> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("text_embeddings.json"))?)?;
        let head: ExportImageHead =
            serde_json::from_str(&std::fs::read_to_string(dir.join("image_head.json"))?)?;
        if head.rows != meta.dim || head.cols != 192 {
            return Err(Error::Config(format!(
                "image head must be [{} x 192], got [{} x {}]",
                meta.dim, head.rows, head.cols
            )));
        }
        Ok(Self {
            dim: meta.dim,
            text,
            weight: Tensor::new(&[head.rows, head.cols], head.weight),
            bias: Tensor::new(&[meta.dim], head.bias),
        })
    }
}

impl JointEmbedder for ExportEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        let v = self.text.get(text).ok_or_else(|| {
            Error::Config(format!("exported text table has no entry for {text:?}"))
        })?;
        if v.len() != self.dim {
            return Err(Error::Config(format!(
                "exported entry for {text:?} has width {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(Tensor::new(&[self.dim], v.clone()))
    }

    fn embed_image(&self, tape: &Tape, image: Var) -> Result<Var> {
        let small = tape.resize_bilinear(image, 8, 8);
        let flat = tape.reshape(small, &[1, 192]);
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let out = tape.reshape(tape.linear(flat, w, b), &[self.dim]);
        let sq = tape.sum(tape.square(out));
        let norm = tape.sqrt(tape.add_scalar(sq, 1e-30));
        Ok(tape.scale_var(out, tape.recip(norm)))
    }
}

// serde helpers for Tensor fields

mod tensor_rows {
    use super::Tensor;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Tensor, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let m = rows.len();
        let e = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * e);
        for r in &rows {
            if r.len() != e {
                return Err(serde::de::Error::custom("ragged embedding matrix"));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor::new(&[m, e], data))
    }
}

mod tensor_vec {
    use super::Tensor;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        t.data().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Tensor, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        let n = v.len();
        Ok(Tensor::new(&[n], v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_template_list_has_79_entries() {
        let t = default_templates();
        assert_eq!(t.len(), 79);
        assert!(t.iter().all(|s| s.matches("{}").count() == 1));
    }

    #[test]
    fn expansion_replaces_placeholder_in_order() {
        let templates = vec!["a photo of {}".to_string(), "{} style".to_string()];
        let out = expand_templates("oil painting", &templates).unwrap();
        assert_eq!(out, vec!["a photo of oil painting", "oil painting style"]);
    }

    #[test]
    fn empty_template_list_expands_to_empty() {
        assert_eq!(expand_templates("x", &[]).unwrap(), Vec::<String>::new());
    }

    #[test]
    fn template_without_placeholder_is_an_error() {
        let templates = vec!["no placeholder".to_string()];
        assert!(matches!(
            expand_templates("x", &templates),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn stub_text_embedding_is_unit_norm_and_deterministic() {
        let e = StubEmbedder::new(1, 32).unwrap();
        let a = e.embed_text("x").unwrap();
        let b = e.embed_text("x").unwrap();
        assert_eq!(a, b);
        assert!((a.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stub_seeds_differ() {
        let a = StubEmbedder::new(1, 32).unwrap().embed_text("x").unwrap();
        let b = StubEmbedder::new(2, 32).unwrap().embed_text("x").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn stub_width_below_8_rejected() {
        assert!(matches!(StubEmbedder::new(0, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn red_and_blue_images_separate_in_embedding_space() {
        let e = StubEmbedder::new(3, 64).unwrap();
        let mut red = Tensor::zeros(&[3, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE]);
        for v in red.data_mut()[..CLIP_IMAGE_SIZE * CLIP_IMAGE_SIZE].iter_mut() {
            *v = 1.0;
        }
        let mut blue = Tensor::zeros(&[3, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE]);
        for v in blue.data_mut()[2 * CLIP_IMAGE_SIZE * CLIP_IMAGE_SIZE..].iter_mut() {
            *v = 1.0;
        }
        let er = e.embed_image_tensor(&red).unwrap();
        let eb = e.embed_image_tensor(&blue).unwrap();
        let cos = er.mul(&eb).sum();
        assert!(cos < 0.99, "cosine {cos} too high for distinct colors");
        assert!((er.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn style_embedding_mean_matches_bruteforce() {
        let embedder = StubEmbedder::new(5, 16).unwrap();
        let templates = default_templates();
        let se = embed_style("oil painting", &embedder, &templates).unwrap();
        assert_eq!(se.vectors.shape(), &[79, 16]);
        // brute-force recomputation of the column mean
        for j in 0..16 {
            let mut acc = 0.0;
            for i in 0..79 {
                acc += se.vectors.at2(i, j);
            }
            assert_eq!(acc / 79.0, se.mean.data()[j]);
        }
    }

    #[test]
    fn same_style_twice_is_identical_and_styles_differ() {
        let embedder = StubEmbedder::new(5, 16).unwrap();
        let templates = default_templates();
        let a = embed_style("fire", &embedder, &templates).unwrap();
        let b = embed_style("fire", &embedder, &templates).unwrap();
        let c = embed_style("ice", &embedder, &templates).unwrap();
        assert_eq!(a, b);
        assert!(a.mean.max_abs_diff(&c.mean) > 1e-9);
    }

    #[test]
    fn style_embedding_json_roundtrip() {
        let embedder = StubEmbedder::new(5, 16).unwrap();
        let templates = vec!["{} art".to_string(), "a {} photo".to_string()];
        let se = embed_style("mosaic", &embedder, &templates).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.json");
        se.save(&path).unwrap();
        let back = StyleEmbedding::load(&path).unwrap();
        assert_eq!(back, se);
    }

    #[test]
    fn export_embedder_roundtrip_and_missing_prompt() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meta.json"), r#"{"dim": 8}"#).unwrap();
        let table = serde_json::json!({ "hello": [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] });
        std::fs::write(dir.path().join("text_embeddings.json"), table.to_string()).unwrap();
        let head = ExportImageHead {
            rows: 8,
            cols: 192,
            weight: vec![0.01; 8 * 192],
            bias: vec![0.0; 8],
        };
        std::fs::write(
            dir.path().join("image_head.json"),
            serde_json::to_string(&head).unwrap(),
        )
        .unwrap();
        let e = ExportEmbedder::load(dir.path()).unwrap();
        assert_eq!(e.embed_text("hello").unwrap().data()[0], 1.0);
        assert!(e.embed_text("absent").is_err());
        let img = Tensor::full(&[3, CLIP_IMAGE_SIZE, CLIP_IMAGE_SIZE], 0.5);
        let v = e.embed_image_tensor(&img).unwrap();
        assert!((v.l2_norm() - 1.0).abs() < 1e-6);
    }
}
