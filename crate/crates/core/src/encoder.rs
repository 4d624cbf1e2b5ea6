//! Shallow convolutional image encoder.
//!
//! Three 3x3 conv blocks with strides 1, 2, 2 (total stride 4) and ReLU
//! after each, channels 3 -> c1 -> c2 -> c3. This is the shape of a
//! three-layer VGG slice; weights are either seeded at random or loaded
//! from a tensor bundle, so no pretrained assets are bundled. The same
//! instance doubles as the perceptual-loss feature extractor (stage
//! outputs, equal weights).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::serialize;
use crate::tensor::Tensor;

/// Paper-reference channel plan for the encoder.
pub const REFERENCE_CHANNELS: (usize, usize, usize) = (64, 128, 256);

pub trait ImageEncoder {
    /// Feature-grid downsampling factor.
    fn stride(&self) -> usize;
    /// Channel count of the final feature map.
    fn channels(&self) -> usize;
    /// Record the encoder on a tape and return all stage outputs
    /// (the last one is the feature map).
    fn encode_stages(&self, tape: &Tape, image: Var) -> Result<Vec<Var>>;

    /// Plain forward pass to the final `[C, H/stride, W/stride]` map.
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        let stages = self.encode_stages(&tape, x)?;
        Ok(tape.value(*stages.last().expect("encoder has stages")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    // w1, b1, w2, b2, w3, b3
    params: Vec<Tensor>,
    channels: (usize, usize, usize),
}

impl ConvEncoder {
    pub const STRIDE: usize = 4;

    pub fn from_seed(seed: u64, channels: (usize, usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, c3) = channels;
        let he = |c_out: usize, c_in: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            Tensor::rand_normal(&[c_out, c_in, 3, 3], std, rng)
        };
        let params = vec![
            he(c1, 3, &mut rng),
            Tensor::zeros(&[c1]),
            he(c2, c1, &mut rng),
            Tensor::zeros(&[c2]),
            he(c3, c2, &mut rng),
            Tensor::zeros(&[c3]),
        ];
        Self { params, channels }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor)> = NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        serialize::write_bundle(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = serialize::read_bundle(path)?;
        Self::from_entries(&entries)
    }

    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let params: Vec<Tensor> = NAMES
            .iter()
            .map(|n| serialize::find(entries, n).cloned())
            .collect::<Result<_>>()?;
        let channels = (
            params[0].shape()[0],
            params[2].shape()[0],
            params[4].shape()[0],
        );
        Ok(Self { params, channels })
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }
}

const NAMES: [&str; 6] = [
    "encoder.conv1.weight",
    "encoder.conv1.bias",
    "encoder.conv2.weight",
    "encoder.conv2.bias",
    "encoder.conv3.weight",
    "encoder.conv3.bias",
];

impl ImageEncoder for ConvEncoder {
    fn stride(&self) -> usize {
        Self::STRIDE
    }

    fn channels(&self) -> usize {
        self.channels.2
    }

    fn encode_stages(&self, tape: &Tape, image: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(image);
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::ShapeMismatch {
                expected: "[3, H, W]".into(),
                got: format!("{shape:?}"),
            });
        }
        if shape[1] < Self::STRIDE || shape[2] < Self::STRIDE {
            return Err(Error::ShapeMismatch {
                expected: format!("image at least {0}x{0}", Self::STRIDE),
                got: format!("{}x{}", shape[1], shape[2]),
            });
        }
        let p = |i: usize| tape.constant(self.params[i].clone());
        let s1 = tape.relu(tape.conv2d(image, p(0), p(1), 1, 1));
        let s2 = tape.relu(tape.conv2d(s1, p(2), p(3), 2, 1));
        let s3 = tape.relu(tape.conv2d(s2, p(4), p(5), 2, 1));
        Ok(vec![s1, s2, s3])
    }
}
