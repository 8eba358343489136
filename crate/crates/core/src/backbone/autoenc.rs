//! Fixed, lossless autoencoder between pixel space and latent space: a
//! patchify reshape with spatial reduction `d`, so `decode(encode(x)) == x`
//! exactly. Pixels in [0, 1] map affinely onto [-1, 1] latents.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::video::VideoClip;

/// Per-frame latent tensor `[F, C_l, h, w]` the diffusion process runs on.
#[derive(Clone, Debug)]
pub struct LatentVideo {
    pub latents: Tensor,
    /// Diffusion timestep this latent sits at, when known.
    pub timestep: Option<usize>,
}

impl LatentVideo {
    pub fn frames(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.latents.shape()[1]
    }
}

/// Patchify: `[F, H, W, C]` pixels to `[F, C*d*d, H/d, W/d]` latents.
pub fn encode(clip: &VideoClip, reduction: usize) -> Result<LatentVideo> {
    let d = reduction;
    if d == 0 || !d.is_power_of_two() {
        return Err(CoreError::Config(format!(
            "reduction must be a power of two, got {d}"
        )));
    }
    let (f, h, w, c) = (clip.frames(), clip.height(), clip.width(), clip.channels());
    if h % d != 0 || w % d != 0 {
        return Err(CoreError::Shape(format!(
            "frame size {h}x{w} not divisible by reduction {d}"
        )));
    }
    let (lh, lw) = (h / d, w / d);
    let cl = c * d * d;
    let mut data = vec![0.0f64; f * cl * lh * lw];
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (py, dy) = (y / d, y % d);
                    let (px, dx) = (x / d, x % d);
                    let lc = (ch * d + dy) * d + dx;
                    let v = clip.get(t, y, x, ch) as f64;
                    data[((t * cl + lc) * lh + py) * lw + px] = 2.0 * v - 1.0;
                }
            }
        }
    }
    Ok(LatentVideo {
        latents: Tensor::from_vec(&[f, cl, lh, lw], data),
        timestep: Some(0),
    })
}

/// Unpatchify back to pixels; values are clamped to `[0, 1]`.
pub fn decode(
    latent: &LatentVideo,
    reduction: usize,
    id: impl Into<String>,
    fps: f64,
) -> Result<VideoClip> {
    let d = reduction;
    let shape = latent.latents.shape();
    if shape.len() != 4 {
        return Err(CoreError::Shape(format!(
            "latent must be [F, C, h, w], got {shape:?}"
        )));
    }
    let (f, cl, lh, lw) = (shape[0], shape[1], shape[2], shape[3]);
    if d == 0 || cl % (d * d) != 0 {
        return Err(CoreError::Shape(format!(
            "latent channels {cl} not divisible by d^2 = {}",
            d * d
        )));
    }
    let c = cl / (d * d);
    let (h, w) = (lh * d, lw * d);
    let mut data = vec![0.0f32; f * h * w * c];
    for t in 0..f {
        for lc in 0..cl {
            let ch = lc / (d * d);
            let dy = (lc / d) % d;
            let dx = lc % d;
            for py in 0..lh {
                for px in 0..lw {
                    let z = latent.latents.data()[((t * cl + lc) * lh + py) * lw + px];
                    let v = ((z + 1.0) / 2.0).clamp(0.0, 1.0) as f32;
                    let (y, x) = (py * d + dy, px * d + dx);
                    data[((t * h + y) * w + x) * c + ch] = v;
                }
            }
        }
    }
    VideoClip::new(id, f, h, w, c, fps, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn patchify_shape_matches_contract() {
        let clip = VideoClip::from_fn("c", 2, 16, 16, 1, 8.0, |t, y, x, _| {
            ((t * 31 + y * 7 + x) % 13) as f32 / 13.0
        })
        .unwrap();
        let latent = encode(&clip, 8).unwrap();
        assert_eq!(latent.latents.shape(), &[2, 64, 2, 2]);
    }

    #[test]
    fn constant_clip_gives_constant_latent_channels() {
        let clip = VideoClip::from_fn("c", 2, 8, 8, 1, 8.0, |_, _, _, _| 0.25).unwrap();
        let latent = encode(&clip, 4).unwrap();
        for v in latent.latents.data() {
            assert_eq!(*v, 2.0 * 0.25 - 1.0);
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let clip = VideoClip::from_fn("r", 3, 16, 24, 3, 8.0, |_, _, _, _| rng.random::<f32>())
            .unwrap();
        let latent = encode(&clip, 8).unwrap();
        let back = decode(&latent, 8, "r", 8.0).unwrap();
        assert_eq!(back.data(), clip.data(), "round-trip must be lossless");
    }

    #[test]
    fn indivisible_dims_are_shape_errors() {
        let clip = VideoClip::from_fn("c", 2, 10, 16, 1, 8.0, |_, _, _, _| 0.5).unwrap();
        assert!(matches!(encode(&clip, 8), Err(CoreError::Shape(_))));
    }
}
