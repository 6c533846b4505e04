//! Run-time image augmentation and bilinear resizing.
//!
//! The random rotation, shifts, shear, and zoom compose into a single
//! affine transform so the image is resampled exactly once (bilinear, with
//! nearest-edge fill outside the frame). Flips fold into the same
//! transform; rescaling by `1/255` happens last.
//!
//! Draw order from the per-sample generator is fixed: rotation, width
//! shift, height shift, shear, zoom, horizontal flip, vertical flip. All
//! seven draws are consumed on every call regardless of which transforms
//! are enabled, so streams stay aligned across configurations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::Result;

/// Augmentation ranges. Defaults are the full pipeline; each field can be
/// overridden independently.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub rescale: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Zoom factor range, sampled uniformly.
    pub zoom_range: (f64, f64),
    /// Rotation range in degrees, sampled uniformly.
    pub rotation_degrees: (f64, f64),
    /// Horizontal shift as a fraction of width, sampled in `±width_shift`.
    pub width_shift: f64,
    /// Vertical shift as a fraction of height, sampled in `±height_shift`.
    pub height_shift: f64,
    /// Shear factor, sampled in `±shear`.
    pub shear: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rescale: 1.0 / 255.0,
            horizontal_flip: true,
            vertical_flip: true,
            zoom_range: (0.85, 1.15),
            rotation_degrees: (0.0, 360.0),
            width_shift: 0.15,
            height_shift: 0.15,
            shear: 0.15,
        }
    }
}

impl AugmentationConfig {
    /// Every geometric transform disabled; only the rescale applies.
    pub fn identity() -> Self {
        AugmentationConfig {
            rescale: 1.0 / 255.0,
            horizontal_flip: false,
            vertical_flip: false,
            zoom_range: (1.0, 1.0),
            rotation_degrees: (0.0, 0.0),
            width_shift: 0.0,
            height_shift: 0.0,
            shear: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.zoom_range.0 <= 0.0 || self.zoom_range.1 < self.zoom_range.0 {
            return Err(Error::invalid("augment", "zoom bounds must be positive and ordered"));
        }
        Ok(())
    }
}

/// 2x2 linear part plus translation.
#[derive(Clone, Copy)]
struct Affine {
    a: [f64; 4],
    t: [f64; 2],
}

impl Affine {
    fn identity() -> Self {
        Affine {
            a: [1.0, 0.0, 0.0, 1.0],
            t: [0.0, 0.0],
        }
    }

    /// Applies `self` after `inner`: `x -> self(inner(x))`.
    fn compose(self, inner: Affine) -> Affine {
        let a = [
            self.a[0] * inner.a[0] + self.a[1] * inner.a[2],
            self.a[0] * inner.a[1] + self.a[1] * inner.a[3],
            self.a[2] * inner.a[0] + self.a[3] * inner.a[2],
            self.a[2] * inner.a[1] + self.a[3] * inner.a[3],
        ];
        let t = [
            self.a[0] * inner.t[0] + self.a[1] * inner.t[1] + self.t[0],
            self.a[2] * inner.t[0] + self.a[3] * inner.t[1] + self.t[1],
        ];
        Affine { a, t }
    }

    fn inverse(self) -> Result<Affine> {
        let det = self.a[0] * self.a[3] - self.a[1] * self.a[2];
        if det.abs() < 1e-12 {
            return Err(Error::invalid("augment", "degenerate affine transform"));
        }
        let inv = [
            self.a[3] / det,
            -self.a[1] / det,
            -self.a[2] / det,
            self.a[0] / det,
        ];
        let t = [
            -(inv[0] * self.t[0] + inv[1] * self.t[1]),
            -(inv[2] * self.t[0] + inv[3] * self.t[1]),
        ];
        Ok(Affine { a: inv, t })
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0] * x + self.a[1] * y + self.t[0],
            self.a[2] * x + self.a[3] * y + self.t[1],
        )
    }
}

fn grayscale_dims(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match image.shape()[..] {
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::invalid(
            op,
            alloc::format!("expected [1,H,W] grayscale tensor, got {:?}", image.shape()),
        )),
    }
}

/// Bilinear sample with coordinates clamped to the frame (nearest-edge fill).
#[inline]
fn sample_bilinear(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = math::floor(x) as usize;
    let y0 = math::floor(y) as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = data[y0 * w + x0];
    let v01 = data[y0 * w + x1];
    let v10 = data[y1 * w + x0];
    let v11 = data[y1 * w + x1];
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bottom = v10 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Applies the augmentation pipeline to a raw 0-255 grayscale image and
/// returns a `[1,H,W]` tensor in `[0,1]`.
pub fn augment(image: &Tensor, config: &AugmentationConfig, rng: &mut SplitMix64) -> Result<Tensor> {
    config.validate()?;
    let (h, w) = grayscale_dims(image, "augment")?;

    let theta = rng.range_f64(config.rotation_degrees.0, config.rotation_degrees.1) * core::f64::consts::PI / 180.0;
    let dx = rng.range_f64(-config.width_shift, config.width_shift) * w as f64;
    let dy = rng.range_f64(-config.height_shift, config.height_shift) * h as f64;
    let shear = rng.range_f64(-config.shear, config.shear);
    let zoom = rng.range_f64(config.zoom_range.0, config.zoom_range.1);
    let hflip = rng.next_bool() && config.horizontal_flip;
    let vflip = rng.next_bool() && config.vertical_flip;

    // Forward map in centered coordinates, applied in order:
    // rotate, shift, shear, zoom, flips.
    let rot = Affine {
        a: [math::cos(theta), -math::sin(theta), math::sin(theta), math::cos(theta)],
        t: [0.0, 0.0],
    };
    let shift = Affine {
        a: [1.0, 0.0, 0.0, 1.0],
        t: [dx, dy],
    };
    let sh = Affine {
        a: [1.0, shear, 0.0, 1.0],
        t: [0.0, 0.0],
    };
    let zm = Affine {
        a: [zoom, 0.0, 0.0, zoom],
        t: [0.0, 0.0],
    };
    let flip = Affine {
        a: [
            if hflip { -1.0 } else { 1.0 },
            0.0,
            0.0,
            if vflip { -1.0 } else { 1.0 },
        ],
        t: [0.0, 0.0],
    };
    let forward = flip.compose(zm.compose(sh.compose(shift.compose(rot))));
    let inverse = forward.inverse()?;

    let is_identity = theta == 0.0 && dx == 0.0 && dy == 0.0 && shear == 0.0 && zoom == 1.0 && !hflip && !vflip;

    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    if is_identity {
        // Skip resampling entirely so the disabled pipeline is bit-exact.
        for (o, &v) in out.iter_mut().zip(image.iter()) {
            *o = v * config.rescale;
        }
    } else {
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = inverse.apply(ox as f64 - cx, oy as f64 - cy);
                let v = sample_bilinear(image.data(), h, w, sx + cx, sy + cy);
                out[oy * w + ox] = v * config.rescale;
            }
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Corner-aligned bilinear resize of a `[1,H,W]` or `[H,W]` tensor.
pub fn resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "target extents must be positive"));
    }
    let (h, w, channel_shape) = match image.shape()[..] {
        [1, h, w] => (h, w, true),
        [h, w] => (h, w, false),
        _ => {
            return Err(Error::invalid(
                "resize",
                alloc::format!("expected [H,W] or [1,H,W], got {:?}", image.shape()),
            ))
        }
    };
    if h == out_h && w == out_w {
        return Ok(image.clone());
    }
    let scale_y = if out_h > 1 {
        (h as f64 - 1.0) / (out_h as f64 - 1.0)
    } else {
        0.0
    };
    let scale_x = if out_w > 1 {
        (w as f64 - 1.0) / (out_w as f64 - 1.0)
    } else {
        0.0
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let sy = if out_h > 1 { oy as f64 * scale_y } else { (h as f64 - 1.0) / 2.0 };
        for ox in 0..out_w {
            let sx = if out_w > 1 { ox as f64 * scale_x } else { (w as f64 - 1.0) / 2.0 };
            out[oy * out_w + ox] = sample_bilinear(image.data(), h, w, sx, sy);
        }
    }
    if channel_shape {
        Tensor::new(vec![1, out_h, out_w], out)
    } else {
        Tensor::new(vec![out_h, out_w], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn disabled_pipeline_is_pure_rescale() {
        let img = raw(2, 2, vec![10.0, 20.0, 30.0, 255.0]);
        let mut rng = SplitMix64::new(0);
        let out = augment(&img, &AugmentationConfig::identity(), &mut rng).unwrap();
        let expect: Vec<f64> = img.iter().map(|&v| v / 255.0).collect();
        assert_eq!(out.data(), &expect[..]);
    }

    #[test]
    fn forced_full_rotation_reverses_indices() {
        let img = raw(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let cfg = AugmentationConfig {
            rotation_degrees: (180.0, 180.0),
            ..AugmentationConfig::identity()
        };
        let mut rng = SplitMix64::new(0);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        let expect = [4.0 / 255.0, 3.0 / 255.0, 2.0 / 255.0, 1.0 / 255.0];
        for (got, want) in out.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn forced_identity_zoom_is_exact() {
        let img = raw(3, 3, (0..9).map(|v| v as f64 * 20.0).collect());
        let cfg = AugmentationConfig {
            zoom_range: (1.0, 1.0),
            ..AugmentationConfig::identity()
        };
        let mut rng = SplitMix64::new(4);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        for (got, &orig) in out.iter().zip(img.iter()) {
            assert!((got - orig / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_stay_in_unit_interval_and_keep_shape() {
        let mut rng = SplitMix64::new(11);
        let cfg = AugmentationConfig::default();
        for _ in 0..500 {
            let data: Vec<f64> = (0..64).map(|_| rng.range_f64(0.0, 255.0)).collect();
            let img = raw(8, 8, data);
            let out = augment(&img, &cfg, &mut rng).unwrap();
            assert_eq!(out.shape(), &[1, 8, 8]);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = raw(4, 4, (0..16).map(|v| v as f64).collect());
        let cfg = AugmentationConfig::default();
        let a = augment(&img, &cfg, &mut SplitMix64::new(77)).unwrap();
        let b = augment(&img, &cfg, &mut SplitMix64::new(77)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn resize_same_size_is_bit_identical() {
        let img = raw(3, 3, (0..9).map(|v| v as f64 / 7.0).collect());
        let out = resize(&img, 3, 3).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = raw(2, 2, vec![0.4; 4]);
        let out = resize(&img, 5, 7).unwrap();
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn resize_bilinear_midpoint() {
        let img = raw(2, 2, vec![0.0, 0.0, 2.0, 2.0]);
        let out = resize(&img, 3, 3).unwrap();
        assert_eq!(&out.data()[3..6], &[1.0, 1.0, 1.0]);
    }
}
