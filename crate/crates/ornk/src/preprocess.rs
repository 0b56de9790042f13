//! Region cropping and resizing. Three region kinds: the annotated disc
//! box, the disc box grown by a margin, or the full frame.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Pixel rectangle, half-open: x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl DiscBox {
    pub fn validate(&self) -> Result<()> {
        if self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Config(format!(
                "degenerate box ({},{})-({},{})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Disc,
    Edisc,
    Original,
}

impl RegionKind {
    pub fn label(&self) -> &'static str {
        match self {
            RegionKind::Disc => "disc",
            RegionKind::Edisc => "edisc",
            RegionKind::Original => "original",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub kind: RegionKind,
    /// Expansion margin in pixels for the grown-disc kind. When absent it
    /// defaults to a quarter of the longer box side.
    #[serde(default)]
    pub expansion: Option<f64>,
}

impl RegionSpec {
    pub fn disc() -> Self {
        RegionSpec { kind: RegionKind::Disc, expansion: None }
    }

    pub fn edisc() -> Self {
        RegionSpec { kind: RegionKind::Edisc, expansion: None }
    }

    pub fn original() -> Self {
        RegionSpec { kind: RegionKind::Original, expansion: None }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.expansion {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::Config("expansion must be finite and non-negative".into()));
            }
            if self.kind != RegionKind::Edisc {
                return Err(Error::Config(
                    "expansion only applies to the edisc region kind".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Bilinear resize with edge clamping, half-pixel centers.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = src.shape() else {
        return Err(Error::Shape(format!("resize expects [C,H,W], got {:?}", src.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be non-empty".into()));
    }
    if h == out_h && w == out_w {
        return Ok(src.clone());
    }
    let mut out = vec![0.0; c * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = fx - x0 as f64;
                let v = (1.0 - dy) * ((1.0 - dx) * plane[y0 * w + x0] + dx * plane[y0 * w + x1])
                    + dy * ((1.0 - dx) * plane[y1 * w + x0] + dx * plane[y1 * w + x1]);
                dst[oy * out_w + ox] = v;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

fn crop(src: &Tensor, x0: usize, y0: usize, x1: usize, y1: usize) -> Tensor {
    let &[c, h, w] = src.shape() else { unreachable!("checked by caller") };
    debug_assert!(x1 <= w && y1 <= h && x0 < x1 && y0 < y1);
    let (cw, chh) = (x1 - x0, y1 - y0);
    let mut out = Vec::with_capacity(c * chh * cw);
    for ch in 0..c {
        let plane = &src.data()[ch * h * w..(ch + 1) * h * w];
        for y in y0..y1 {
            out.extend_from_slice(&plane[y * w + x0..y * w + x1]);
        }
    }
    Tensor::new(vec![c, chh, cw], out).expect("crop shape consistent")
}

/// Cuts the configured region out of `raw` ([3,H,W], values already in
/// [0,1]) and resizes it to `target` x `target`. Disc kinds need the box;
/// the grown kind expands it on all four sides, clamped to the frame.
pub fn preprocess(
    raw: &Tensor,
    region: &RegionSpec,
    disc_box: Option<&DiscBox>,
    target: usize,
) -> Result<Tensor> {
    region.validate()?;
    let &[_, h, w] = raw.shape() else {
        return Err(Error::Shape(format!("preprocess expects [C,H,W], got {:?}", raw.shape())));
    };
    let cropped = match region.kind {
        RegionKind::Original => raw.clone(),
        RegionKind::Disc | RegionKind::Edisc => {
            let bx = disc_box.ok_or_else(|| {
                Error::Missing(format!("{} region needs a disc box", region.kind.label()))
            })?;
            bx.validate()?;
            if bx.x1 as usize > w || bx.y1 as usize > h {
                return Err(Error::Config(format!(
                    "disc box ({},{})-({},{}) exceeds the {w}x{h} frame",
                    bx.x0, bx.y0, bx.x1, bx.y1
                )));
            }
            let t = if region.kind == RegionKind::Edisc {
                region
                    .expansion
                    .unwrap_or_else(|| 0.25 * f64::from(bx.width().max(bx.height())))
            } else {
                0.0
            };
            let x0 = (f64::from(bx.x0) - t).max(0.0) as usize;
            let y0 = (f64::from(bx.y0) - t).max(0.0) as usize;
            let x1 = ((f64::from(bx.x1) + t).ceil() as usize).min(w);
            let y1 = ((f64::from(bx.y1) + t).ceil() as usize).min(h);
            crop(raw, x0, y0, x1, y1)
        }
    };
    resize_bilinear(&cropped, target, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let x = ramp(3, 5, 5);
        let y = resize_bilinear(&x, 5, 5).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn resize_1d_known_values() {
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_downscale_averages() {
        let x = Tensor::new(vec![1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = resize_bilinear(&x, 1, 2).unwrap();
        for (a, b) in y.data().iter().zip([1.0, 5.0]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn original_ignores_box() {
        let x = ramp(3, 8, 8);
        let bogus = DiscBox { x0: 1, y0: 1, x1: 3, y1: 3 };
        let a = preprocess(&x, &RegionSpec::original(), Some(&bogus), 4).unwrap();
        let b = preprocess(&x, &RegionSpec::original(), None, 4).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_expansion_equals_disc_crop() {
        let x = ramp(3, 10, 10);
        let bx = DiscBox { x0: 2, y0: 3, x1: 7, y1: 8 };
        let disc = preprocess(&x, &RegionSpec::disc(), Some(&bx), 6).unwrap();
        let spec = RegionSpec { kind: RegionKind::Edisc, expansion: Some(0.0) };
        let edisc = preprocess(&x, &spec, Some(&bx), 6).unwrap();
        assert_eq!(disc.data(), edisc.data());
    }

    #[test]
    fn expansion_clamps_to_frame() {
        let x = ramp(3, 6, 6);
        let bx = DiscBox { x0: 0, y0: 0, x1: 4, y1: 4 };
        let spec = RegionSpec { kind: RegionKind::Edisc, expansion: Some(100.0) };
        let out = preprocess(&x, &spec, Some(&bx), 6).unwrap();
        let full = preprocess(&x, &RegionSpec::original(), None, 6).unwrap();
        assert_eq!(out.data(), full.data());
    }

    #[test]
    fn degenerate_and_missing_boxes_rejected() {
        let x = ramp(3, 6, 6);
        let empty = DiscBox { x0: 2, y0: 2, x1: 2, y1: 5 };
        assert!(preprocess(&x, &RegionSpec::disc(), Some(&empty), 4).is_err());
        assert!(preprocess(&x, &RegionSpec::disc(), None, 4).is_err());
        let outside = DiscBox { x0: 2, y0: 2, x1: 9, y1: 5 };
        assert!(preprocess(&x, &RegionSpec::disc(), Some(&outside), 4).is_err());
    }

    #[test]
    fn disc_crop_values() {
        let x = ramp(1, 4, 4);
        let bx = DiscBox { x0: 1, y0: 1, x1: 3, y1: 3 };
        let out = preprocess(&x, &RegionSpec::disc(), Some(&bx), 2).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }
}
