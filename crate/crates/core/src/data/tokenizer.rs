//! Stand-in for a learned latent autoencoder.

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VdtError};
use crate::{LatentClip, VideoClip};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tokenizer {
    /// Latent equals pixels.
    #[default]
    Identity,
    /// Block averages over `factor x factor` pixels.
    Pool { factor: usize },
}

impl Tokenizer {
    pub fn factor(&self) -> usize {
        match *self {
            Tokenizer::Identity => 1,
            Tokenizer::Pool { factor } => factor,
        }
    }

    /// Latent `(H', W', C)` for frames of `height x width x channels`.
    pub fn latent_dims(
        &self,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<(usize, usize, usize)> {
        let n = self.factor();
        if n == 0 || !height.is_multiple_of(n) || !width.is_multiple_of(n) {
            return Err(VdtError::Indivisible {
                dim: "frame size",
                value: if n != 0 && !height.is_multiple_of(n) {
                    height
                } else {
                    width
                },
                divisor: n,
            });
        }
        Ok((height / n, width / n, channels))
    }

    pub fn encode(&self, x: &VideoClip) -> Result<LatentClip> {
        let (f, h, w, c) = x.dim();
        let n = self.factor();
        let (lh, lw, _) = self.latent_dims(h, w, c)?;
        if n == 1 {
            return Ok(x.clone());
        }
        let area = (n * n) as f64;
        Ok(Array4::from_shape_fn((f, lh, lw, c), |(fi, i, j, ch)| {
            x.slice(s![fi, i * n..(i + 1) * n, j * n..(j + 1) * n, ch])
                .sum()
                / area
        }))
    }

    /// Nearest-neighbour upsampling back to pixel resolution.
    pub fn decode(&self, z: &LatentClip) -> LatentClip {
        let n = self.factor();
        if n == 1 {
            return z.clone();
        }
        let (f, h, w, c) = z.dim();
        Array4::from_shape_fn((f, h * n, w * n, c), |(fi, i, j, ch)| {
            z[[fi, i / n, j / n, ch]]
        })
    }
}

/// `[0, 1] -> [-1, 1]`.
pub fn normalize(x: &VideoClip) -> LatentClip {
    x.mapv(|v| 2.0 * v - 1.0)
}

/// `[-1, 1] -> [0, 1]`, clamping out-of-range values.
pub fn denormalize(z: &LatentClip) -> VideoClip {
    z.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Pixels to normalised latents.
pub fn to_latent(tok: &Tokenizer, x: &VideoClip) -> Result<LatentClip> {
    Ok(normalize(&tok.encode(x)?))
}

/// Normalised latents back to pixels in `[0, 1]`.
pub fn to_pixels(tok: &Tokenizer, z: &LatentClip) -> VideoClip {
    tok.decode(&denormalize(z))
}
