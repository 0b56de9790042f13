//! Train-time image augmentation. One draw per sample covers zoom, shift,
//! horizontal flip, rotation and brightness; the geometric part is applied
//! identically to every channel while brightness touches only the first
//! three, so an appended mask channel rides along unchanged.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Zoom factor varies in 1 ± this fraction.
    pub zoom_range: f64,
    /// Shift in ± this fraction of the image side, both axes.
    pub shift_range: f64,
    pub hflip: bool,
    /// Rotation in ± this many degrees.
    pub rotation_range: f64,
    /// Brightness factor varies in 1 ± this fraction.
    pub brightness_range: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            zoom_range: 0.20,
            shift_range: 0.20,
            hflip: true,
            rotation_range: 45.0,
            brightness_range: 0.40,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("zoom_range", self.zoom_range),
            ("shift_range", self.shift_range),
            ("rotation_range", self.rotation_range),
            ("brightness_range", self.brightness_range),
        ];
        for (name, v) in ranges {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::Config("zoom_range must stay below 1".into()));
        }
        if self.brightness_range >= 1.0 {
            return Err(Error::Config("brightness_range must stay below 1".into()));
        }
        Ok(())
    }

    pub fn identity() -> Self {
        AugmentPolicy {
            zoom_range: 0.0,
            shift_range: 0.0,
            hflip: false,
            rotation_range: 0.0,
            brightness_range: 0.0,
        }
    }
}

/// One concrete sampled transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip: bool,
    /// Radians.
    pub rotation: f64,
    pub brightness: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            zoom: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            flip: false,
            rotation: 0.0,
            brightness: 1.0,
        }
    }

    pub fn geometry_is_identity(&self) -> bool {
        self.zoom == 1.0
            && self.shift_x == 0.0
            && self.shift_y == 0.0
            && !self.flip
            && self.rotation == 0.0
    }

    /// The same transform with brightness stripped.
    pub fn geometric_only(&self) -> Self {
        AugmentDraw { brightness: 1.0, ..self.clone() }
    }
}

/// Samples one transform. Always consumes exactly six uniform draws in a
/// fixed order (zoom, shift x, shift y, flip, rotation, brightness), so
/// the stream position never depends on which ranges are zero.
pub fn draw_transform(policy: &AugmentPolicy, size: usize, rng: &mut ChaCha12Rng) -> AugmentDraw {
    let signed = |range: f64, rng: &mut ChaCha12Rng| {
        (2.0 * rng.random::<f64>() - 1.0) * range
    };
    let zoom = 1.0 + signed(policy.zoom_range, rng);
    let shift_x = signed(policy.shift_range, rng) * size as f64;
    let shift_y = signed(policy.shift_range, rng) * size as f64;
    let flip = {
        let u = rng.random::<f64>();
        policy.hflip && u < 0.5
    };
    let rotation = signed(policy.rotation_range, rng).to_radians();
    let brightness = 1.0 + signed(policy.brightness_range, rng);
    AugmentDraw { zoom, shift_x, shift_y, flip, rotation, brightness }
}

fn bilinear_zero(data: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let dx = x - x0;
    let dy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            data[yi as usize * w + xi as usize]
        }
    };
    let v00 = at(x0, y0);
    let v01 = at(x0 + 1.0, y0);
    let v10 = at(x0, y0 + 1.0);
    let v11 = at(x0 + 1.0, y0 + 1.0);
    (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11)
}

/// Applies a sampled transform to a [C,h,w] tensor. Every channel gets the
/// same geometry; brightness multiplies channels 0..min(3,C) only.
/// Out-of-frame pixels are zero. An identity geometry copies bits through.
pub fn apply_transform(sample: &Tensor, draw: &AugmentDraw) -> Result<Tensor> {
    let &[c, h, w] = sample.shape() else {
        return Err(Error::Shape(format!(
            "augmentation expects [C,h,w], got {:?}",
            sample.shape()
        )));
    };
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let cos = draw.rotation.cos();
    let sin = draw.rotation.sin();
    for ch in 0..c {
        let src = &sample.data()[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        let bright = if ch < 3 { draw.brightness } else { 1.0 };
        if draw.geometry_is_identity() {
            if bright == 1.0 {
                dst.copy_from_slice(src);
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s * bright;
                }
            }
            continue;
        }
        for oy in 0..h {
            for ox in 0..w {
                let mut u = ox as f64 - cx;
                let v = oy as f64 - cy;
                if draw.flip {
                    u = -u;
                }
                u -= draw.shift_x;
                let v = v - draw.shift_y;
                let ru = cos * u + sin * v;
                let rv = -sin * u + cos * v;
                let ix = ru / draw.zoom + cx;
                let iy = rv / draw.zoom + cy;
                let val = bilinear_zero(src, h, w, ix, iy);
                dst[oy * w + ox] = if bright == 1.0 { val } else { val * bright };
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Draw-and-apply convenience used by the training loops.
pub fn augment(sample: &Tensor, policy: &AugmentPolicy, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    let size = *sample.shape().last().ok_or_else(|| {
        Error::Shape("augmentation expects a rank-3 tensor".into())
    })?;
    let draw = draw_transform(policy, size, rng);
    apply_transform(sample, &draw)
}
