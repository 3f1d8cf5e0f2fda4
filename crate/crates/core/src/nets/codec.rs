use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bind, Bound, ParamSet};
use crate::autograd::{conv2d_forward, depth_to_space, space_to_depth, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    #[default]
    Identity,
    Learned,
}

/// Image <-> latent map. The learned variant folds 2x2 pixel blocks into
/// channels and applies a 3x3 conv each way.
#[derive(Clone, Debug, PartialEq)]
pub enum Codec {
    Identity,
    Learned { params: ParamSet, factor: usize },
}

impl Codec {
    pub fn init_learned(seed: u64, channels: usize, latent_channels: usize) -> Self {
        let factor = 2;
        let folded = channels * factor * factor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |co: usize, ci: usize| {
            let d = Normal::new(0.0, (1.0 / (9 * ci) as f64).sqrt()).unwrap();
            Tensor::from_vec(&[co, ci, 3, 3], (0..co * ci * 9).map(|_| d.sample(&mut rng)).collect())
                .unwrap()
        };
        let mut params = ParamSet::new();
        params.insert("enc.w", conv(latent_channels, folded));
        params.insert("enc.b", Tensor::zeros(&[latent_channels]));
        params.insert("dec.w", conv(folded, latent_channels));
        params.insert("dec.b", Tensor::zeros(&[folded]));
        Codec::Learned { params, factor }
    }

    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Identity => CodecKind::Identity,
            Codec::Learned { .. } => CodecKind::Learned,
        }
    }

    pub fn spatial_factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Learned { factor, .. } => *factor,
        }
    }

    /// Channels of the latent produced for an image with `channels` channels.
    pub fn latent_channels(&self, channels: usize) -> usize {
        match self {
            Codec::Identity => channels,
            Codec::Learned { params, .. } => params.get("enc.w").unwrap().shape()[0],
        }
    }

    pub fn params(&self) -> Option<&ParamSet> {
        match self {
            Codec::Identity => None,
            Codec::Learned { params, .. } => Some(params),
        }
    }

    fn check_divisible(&self, x: &Tensor) -> Result<()> {
        let f = self.spatial_factor();
        let s = x.shape();
        if s.len() != 3 || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
            return Err(Error::ShapeNotDivisible {
                shape: s.to_vec(),
                factor: f,
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(x.clone()),
            Codec::Learned { params, factor } => {
                self.check_divisible(x)?;
                let folded = space_to_depth(x, *factor);
                Ok(conv2d_forward(&folded, params.get("enc.w").unwrap(), params.get("enc.b")))
            }
        }
    }

    /// Decodes and clamps to `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(z.map(|v| v.clamp(0.0, 1.0))),
            Codec::Learned { params, factor } => {
                let y = conv2d_forward(z, params.get("dec.w").unwrap(), params.get("dec.b"));
                Ok(depth_to_space(&y, *factor).map(|v| v.clamp(0.0, 1.0)))
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        match self {
            Codec::Identity => Bound::default(),
            Codec::Learned { params, .. } => bind(g, params, trainable),
        }
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Codec::Identity => Ok(x),
            Codec::Learned { factor, .. } => {
                self.check_divisible(g.value(x))?;
                let f = g.space_to_depth(x, *factor);
                Ok(g.conv2d(f, p.get("enc.w"), Some(p.get("enc.b"))))
            }
        }
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        match self {
            Codec::Identity => Ok(g.clamp01(z)),
            Codec::Learned { factor, .. } => {
                let y = g.conv2d(z, p.get("dec.w"), Some(p.get("dec.b")));
                let y = g.depth_to_space(y, *factor);
                Ok(g.clamp01(y))
            }
        }
    }
}
