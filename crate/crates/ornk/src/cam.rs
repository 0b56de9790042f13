//! Class activation maps and their fusion into a single region-of-
//! interest channel. A map weights the last convolutional activations by
//! one row of the softmax-head weights; maps from every binary sub-model
//! are combined with rank-distance weights selected by the aggregated
//! prediction, then z-normalized.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::preprocess::resize_bilinear;
use crate::ranking::SubModelBank;
use crate::tensor::{Mode, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiVariant {
    /// Class-0 maps below the predicted rank, class-1 maps above it.
    Standard,
    /// The ablation that swaps the map classes at interior predictions.
    Swapped,
}

impl RoiVariant {
    pub fn label(&self) -> &'static str {
        match self {
            RoiVariant::Standard => "standard",
            RoiVariant::Swapped => "swapped",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            RoiVariant::Standard => 0,
            RoiVariant::Swapped => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(RoiVariant::Standard),
            1 => Ok(RoiVariant::Swapped),
            other => Err(Error::parse("roi", format!("unknown variant code {other}"))),
        }
    }
}

/// One activation map: the coarse grid straight off the last activations
/// and its upsample to input resolution.
#[derive(Debug, Clone)]
pub struct Cam {
    pub pre_values: Tensor,
    pub values: Tensor,
    pub source_model: usize,
    pub source_class: usize,
}

/// The fused, z-normalized ROI channel for one sample.
#[derive(Debug, Clone)]
pub struct RoiMap {
    pub values: Tensor,
    pub predicted: usize,
    /// (sub-model k, map class, weight) actually summed.
    pub contributions: Vec<(usize, usize, f64)>,
}

/// cam(i,j) = (sum_m w[c][m] * f_m(i,j) + bias_c) / M with M the number
/// of grid cells, so the grid sums exactly to the class logit (the GAP
/// head computes logit = sum_m w[c][m] * mean_ij f_m + bias_c).
pub fn compute_cam(
    model: &Backbone,
    x: &Tensor,
    class: usize,
    upsample: Upsample,
) -> Result<Cam> {
    let (w, b) = model.head_weights()?;
    if class >= model.config().classes {
        return Err(Error::Config(format!(
            "class {class} out of range for {} classes",
            model.config().classes
        )));
    }
    let trace = model.forward(x, Mode::Eval)?;
    let &[n, mh, mw] = trace.last_activations.shape() else {
        return Err(Error::Shape(format!(
            "unexpected activation shape {:?}",
            trace.last_activations.shape()
        )));
    };
    let cells = (mh * mw) as f64;
    let wrow = &w.data()[class * n..(class + 1) * n];
    let bias = b.data()[class];
    let mut pre = vec![0.0; mh * mw];
    for (m, &wm) in wrow.iter().enumerate() {
        let plane = &trace.last_activations.data()[m * mh * mw..(m + 1) * mh * mw];
        for (p, &f) in pre.iter_mut().zip(plane) {
            *p += wm * f;
        }
    }
    for p in pre.iter_mut() {
        *p = (*p + bias) / cells;
    }
    let pre_values = Tensor::new(vec![mh, mw], pre)?;
    let target = model.config().input_size;
    let values = upsample_grid(&pre_values, target, upsample)?;
    Ok(Cam { pre_values, values, source_model: 0, source_class: class })
}

pub fn upsample_grid(grid: &Tensor, target: usize, mode: Upsample) -> Result<Tensor> {
    let &[mh, mw] = grid.shape() else {
        return Err(Error::Shape(format!("expected [H,W] grid, got {:?}", grid.shape())));
    };
    match mode {
        Upsample::Bilinear => {
            let as3 = grid.clone().reshaped(vec![1, mh, mw])?;
            let out = resize_bilinear(&as3, target, target)?;
            out.reshaped(vec![target, target])
        }
        Upsample::Nearest => {
            if target % mh != 0 || target % mw != 0 {
                return Err(Error::Shape(format!(
                    "nearest upsample needs integer factor: {mh}x{mw} -> {target}"
                )));
            }
            let (fy, fx) = (target / mh, target / mw);
            let mut out = vec![0.0; target * target];
            for y in 0..target {
                for x in 0..target {
                    out[y * target + x] = grid.data()[(y / fy) * mw + x / fx];
                }
            }
            Tensor::new(vec![target, target], out)
        }
    }
}

/// Rank-distance weight for sub-model k given interior prediction p:
/// 1/(p-k+1) at or below the prediction, 1/(k-p) above it.
pub fn distance_weight(p: usize, k: usize, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::Config(format!("interior predictions need n >= 3, got {n}")));
    }
    if !(1..=n - 1).contains(&k) {
        return Err(Error::Config(format!("sub-model index {k} outside 1..={}", n - 1)));
    }
    if !(1..=n - 2).contains(&p) {
        return Err(Error::Config(format!(
            "prediction {p} outside the interior range 1..={}; edge predictions use a single map",
            n - 2
        )));
    }
    Ok(if k <= p {
        1.0 / (p - k + 1) as f64
    } else {
        1.0 / (k - p) as f64
    })
}

/// Population z-score; a constant grid maps to all zeros.
pub fn znormalize(grid: &Tensor) -> Tensor {
    let data = grid.data();
    let n = data.len() as f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in data {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    if min == max {
        return Tensor::zeros(grid.shape());
    }
    let mean = sum / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt();
    let out: Vec<f64> = data.iter().map(|v| (v - mean) * inv).collect();
    Tensor::new(grid.shape().to_vec(), out).expect("same shape")
}

fn find_cam<'a>(cams: &'a [Cam], k: usize, class: usize) -> Result<&'a Cam> {
    cams.iter()
        .find(|c| c.source_model == k && c.source_class == class)
        .ok_or_else(|| Error::Missing(format!("no activation map for sub-model {k} class {class}")))
}

/// Fuses per-sub-model maps into one ROI according to the predicted rank.
/// Edge predictions use the single adjacent map; interior predictions sum
/// distance-weighted maps, taking class-0 maps at or below the prediction
/// and class-1 maps above it (the swapped variant inverts that choice).
pub fn merge_roi(cams: &[Cam], p: usize, n: usize, variant: RoiVariant) -> Result<RoiMap> {
    if n < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if p > n - 1 {
        return Err(Error::Config(format!("prediction {p} out of range for {n} classes")));
    }
    let mut picks: Vec<(usize, usize, f64)> = Vec::new();
    if p == 0 {
        picks.push((1, 0, 1.0));
    } else if p == n - 1 {
        picks.push((n - 1, 1, 1.0));
    } else {
        for k in 1..n {
            let weight = distance_weight(p, k, n)?;
            let low_class = match variant {
                RoiVariant::Standard => 0,
                RoiVariant::Swapped => 1,
            };
            let class = if k <= p { low_class } else { 1 - low_class };
            picks.push((k, class, weight));
        }
    }
    let first = find_cam(cams, picks[0].0, picks[0].1)?;
    let shape = first.values.shape().to_vec();
    let mut sum = vec![0.0; first.values.numel()];
    for &(k, class, weight) in &picks {
        let cam = find_cam(cams, k, class)?;
        if cam.values.shape() != shape {
            return Err(Error::Shape(format!(
                "map shapes differ: {:?} vs {:?}",
                cam.values.shape(),
                shape
            )));
        }
        if weight == 1.0 {
            for (s, &v) in sum.iter_mut().zip(cam.values.data()) {
                *s += v;
            }
        } else {
            for (s, &v) in sum.iter_mut().zip(cam.values.data()) {
                *s += weight * v;
            }
        }
    }
    let fused = Tensor::new(shape, sum)?;
    Ok(RoiMap { values: znormalize(&fused), predicted: p, contributions: picks })
}

/// Runs every sub-model over one image and fuses the maps. Only the
/// bank's own predictions pick the fusion branch; no label is consulted.
pub fn roi_for_image(
    bank: &SubModelBank,
    image: &Tensor,
    variant: RoiVariant,
    upsample: Upsample,
) -> Result<RoiMap> {
    let (p, _bits) = bank.aggregate(image)?;
    let mut cams = Vec::with_capacity(2 * (bank.n() - 1));
    for k in 1..bank.n() {
        for class in 0..2 {
            let mut cam = compute_cam(bank.model(k), image, class, upsample)?;
            cam.source_model = k;
            cams.push(cam);
        }
    }
    merge_roi(&cams, p, bank.n(), variant)
}

/// Maps a z-normalized grid onto 8-bit gray for inspection rasters: the
/// value range stretches to 0..255, and an all-zero grid renders mid-gray.
pub fn roi_to_gray(values: &Tensor) -> Vec<u8> {
    let data = values.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return vec![128; data.len()];
    }
    let scale = 255.0 / (max - min);
    data.iter().map(|v| ((v - min) * scale).round() as u8).collect()
}
