//! Video clips and spatial transforms (resize, crop, flip, rotation).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nominal frame rate of the synthetic corpus (informational).
pub const FRAME_RATE: f64 = 25.0;

/// A `[T, H, W, 3]` frame tensor with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 4 || frames.dim(3) != 3 {
            return Err(Error::shape(format!(
                "video clip must be [T, H, W, 3], got {:?}",
                frames.dims()
            )));
        }
        if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::data("clip values must lie in [0, 1]"));
        }
        Ok(VideoClip { frames })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }

    pub fn t(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn h(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn w(&self) -> usize {
        self.frames.dim(2)
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> VideoClip {
        let (t, h, w) = (self.t(), self.h(), self.w());
        let src = self.frames.data();
        let mut out = vec![0.0f32; src.len()];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[((ti * h + y) * w + x) * 3 + c] =
                            src[((ti * h + y) * w + (w - 1 - x)) * 3 + c];
                    }
                }
            }
        }
        VideoClip { frames: Tensor::new(vec![t, h, w, 3], out).expect("flip shape") }
    }

    /// Frames `[start, end]` inclusive.
    pub fn crop_frames(&self, start: usize, end: usize) -> Result<VideoClip> {
        if end < start || end >= self.t() {
            return Err(Error::data(format!(
                "frame span {start}:{end} outside clip of {} frames",
                self.t()
            )));
        }
        let (h, w) = (self.h(), self.w());
        let frame = h * w * 3;
        let data = self.frames.data()[start * frame..(end + 1) * frame].to_vec();
        Ok(VideoClip { frames: Tensor::new(vec![end - start + 1, h, w, 3], data).expect("crop") })
    }
}

fn bilinear_sample(frame: &[f32], h: usize, w: usize, c: usize, sy: f64, sx: f64) -> f32 {
    if sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64 {
        return 0.0;
    }
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = (sy - y0) as f32;
    let fx = (sx - x0) as f32;
    let fetch = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            frame[((yy as usize) * w + (xx as usize)) * 3 + c]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1.0);
    let v10 = fetch(y0 + 1.0, x0);
    let v11 = fetch(y0 + 1.0, x0 + 1.0);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Bilinear resize to a square extent. The identity size maps pixels
/// exactly onto themselves.
pub fn resize_square(clip: &VideoClip, out_hw: usize) -> VideoClip {
    let (t, h, w) = (clip.t(), clip.h(), clip.w());
    if h == out_hw && w == out_hw {
        return clip.clone();
    }
    let src = clip.frames.data();
    let frame_len = h * w * 3;
    let sy_scale = h as f64 / out_hw as f64;
    let sx_scale = w as f64 / out_hw as f64;
    let mut out = vec![0.0f32; t * out_hw * out_hw * 3];
    for ti in 0..t {
        let frame = &src[ti * frame_len..(ti + 1) * frame_len];
        for y in 0..out_hw {
            let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f64);
            for x in 0..out_hw {
                let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f64);
                for c in 0..3 {
                    out[((ti * out_hw + y) * out_hw + x) * 3 + c] =
                        bilinear_sample(frame, h, w, c, sy, sx);
                }
            }
        }
    }
    VideoClip { frames: Tensor::new(vec![t, out_hw, out_hw, 3], out).expect("resize") }
}

/// Central square crop.
pub fn central_crop(clip: &VideoClip, crop: usize) -> Result<VideoClip> {
    let (t, h, w) = (clip.t(), clip.h(), clip.w());
    if crop > h || crop > w {
        return Err(Error::config(format!("crop {crop} larger than clip {h}x{w}")));
    }
    let oy = (h - crop) / 2;
    let ox = (w - crop) / 2;
    let src = clip.frames.data();
    let mut out = Vec::with_capacity(t * crop * crop * 3);
    for ti in 0..t {
        for y in 0..crop {
            let row = ((ti * h + oy + y) * w + ox) * 3;
            out.extend_from_slice(&src[row..row + crop * 3]);
        }
    }
    Ok(VideoClip { frames: Tensor::new(vec![t, crop, crop, 3], out).expect("crop") })
}

/// Rotate every frame by `deg` about the frame center, bilinear resampling
/// with zero fill. Zero degrees is the exact identity.
pub fn rotate(clip: &VideoClip, deg: f64) -> VideoClip {
    let (t, h, w) = (clip.t(), clip.h(), clip.w());
    let rad = deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = clip.frames.data();
    let frame_len = h * w * 3;
    let mut out = vec![0.0f32; src.len()];
    for ti in 0..t {
        let frame = &src[ti * frame_len..(ti + 1) * frame_len];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // inverse rotation of the output grid into source coords
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                for c in 0..3 {
                    out[(ti * frame_len) + (y * w + x) * 3 + c] =
                        bilinear_sample(frame, h, w, c, sy, sx);
                }
            }
        }
    }
    VideoClip { frames: Tensor::new(vec![t, h, w, 3], out).expect("rotate") }
}

/// Training-time augmentation: resize, central crop, then one flip and one
/// rotation drawn per clip so all frames transform coherently.
pub fn augment_train(clip: &VideoClip, cfg: &AugmentConfig, seed: u64) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resized = resize_square(clip, cfg.resize_to);
    let cropped = central_crop(&resized, cfg.crop_to)?;
    let flip = rng.gen_range(0.0..1.0) < cfg.flip_prob;
    let deg = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let flipped = if flip { cropped.flip_horizontal() } else { cropped };
    Ok(if deg != 0.0 { rotate(&flipped, deg) } else { flipped })
}

/// Inference-time transform: resize and central crop only.
pub fn eval_transform(clip: &VideoClip, cfg: &AugmentConfig) -> Result<VideoClip> {
    central_crop(&resize_square(clip, cfg.resize_to), cfg.crop_to)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(max_rot: f64, flip: f64) -> AugmentConfig {
        AugmentConfig { resize_to: 8, crop_to: 6, flip_prob: flip, max_rotation_deg: max_rot }
    }

    fn ramp_clip(t: usize, hw: usize) -> VideoClip {
        let n = t * hw * hw * 3;
        VideoClip::new(Tensor::from_fn(&[t, hw, hw, 3], |i| (i % n) as f32 / n as f32)).unwrap()
    }

    #[test]
    fn clip_rejects_out_of_range_values() {
        let t = Tensor::from_fn(&[1, 2, 2, 3], |i| if i == 5 { 1.5 } else { 0.5 });
        assert!(VideoClip::new(t).is_err());
    }

    #[test]
    fn zero_rotation_zero_flip_is_pure_resize_crop() {
        let clip = ramp_clip(2, 8);
        let a = augment_train(&clip, &cfg(0.0, 0.0), 7).unwrap();
        let b = eval_transform(&clip, &cfg(0.0, 0.0)).unwrap();
        assert_eq!(a.frames().data(), b.frames().data());
    }

    #[test]
    fn same_seed_gives_identical_augmentation() {
        let clip = ramp_clip(3, 10);
        let c = AugmentConfig { resize_to: 10, crop_to: 8, flip_prob: 0.5, max_rotation_deg: 10.0 };
        let a = augment_train(&clip, &c, 123).unwrap();
        let b = augment_train(&clip, &c, 123).unwrap();
        assert_eq!(a.frames().data(), b.frames().data());
        let d = augment_train(&clip, &c, 124).unwrap();
        assert_ne!(a.frames().data(), d.frames().data());
    }

    #[test]
    fn flip_of_mirror_symmetric_pattern_is_identity() {
        // pattern f(x) = f(w-1-x)
        let hw = 8;
        let clip = VideoClip::new(Tensor::from_fn(&[2, hw, hw, 3], |i| {
            let x = (i / 3) % hw;
            let y = (i / 3) / hw % hw;
            let xm = x.min(hw - 1 - x);
            (xm * 7 + y) as f32 / 100.0
        }))
        .unwrap();
        let c = AugmentConfig { resize_to: hw, crop_to: hw, flip_prob: 1.0, max_rotation_deg: 0.0 };
        let c0 = AugmentConfig { flip_prob: 0.0, ..c.clone() };
        let flipped = augment_train(&clip, &c, 5).unwrap();
        let plain = augment_train(&clip, &c0, 5).unwrap();
        assert_eq!(flipped.frames().data(), plain.frames().data());
    }

    #[test]
    fn identity_resize_is_bitwise() {
        let clip = ramp_clip(1, 8);
        let r = resize_square(&clip, 8);
        assert_eq!(r.frames().data(), clip.frames().data());
    }

    #[test]
    fn frame_crop_extracts_inclusive_span() {
        let clip = ramp_clip(5, 4);
        let c = clip.crop_frames(1, 3).unwrap();
        assert_eq!(c.t(), 3);
        let frame = 4 * 4 * 3;
        assert_eq!(c.frames().data(), &clip.frames().data()[frame..4 * frame]);
        assert!(clip.crop_frames(3, 5).is_err());
    }
}
