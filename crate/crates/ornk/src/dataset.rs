//! Image loading and the stratified train/val/test split.

use std::path::Path;

use crate::manifest::Manifest;
use crate::preprocess::DiscBox;
use crate::rng::seed_stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

use rand::seq::SliceRandom;

/// A training or evaluation sample with its ground-truth class.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
    pub disc_box: Option<DiscBox>,
}

/// An input with no label attached; the only type the prediction paths
/// accept, so test-time code cannot read ground truth even by accident.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub image: Tensor,
    pub disc_box: Option<DiscBox>,
}

impl LabeledSample {
    pub fn record(&self) -> ImageRecord {
        ImageRecord {
            id: self.id.clone(),
            image: self.image.clone(),
            disc_box: self.disc_box,
        }
    }
}

/// Reads an 8-bit raster file into a [3,H,W] tensor scaled to [0,1].
/// Grayscale files are replicated across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::parse("image", format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                data[c * h * w + y * w + x] = f64::from(raw[base + c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a [3,H,W] tensor in [0,1] as an 8-bit PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("png writer expects [3,H,W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::Shape(format!("png writer expects 3 channels, got {c}")));
    }
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.data()[ch * h * w + y * w + x];
                raw[(y * w + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    buf.save(path).map_err(|e| Error::parse("image", format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, rel: &str) -> std::path::PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every labeled row. Rows without labels are an error. With
/// `strict` off, unreadable files are skipped with a warning instead of
/// failing the whole load.
pub fn load_labeled(manifest: &Manifest, base: &Path, strict: bool) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(manifest.len());
    for row in &manifest.rows {
        let label = row.label.ok_or_else(|| {
            Error::Missing(format!("sample {:?} has no label; cannot train or score on it", row.id))
        })?;
        match load_image(&resolve(base, &row.path)) {
            Ok(image) => out.push(LabeledSample {
                id: row.id.clone(),
                image,
                label,
                disc_box: row.disc_box,
            }),
            Err(e) if !strict => log::warn!("skipping {:?}: {e}", row.id),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Loads rows without consulting labels at all.
pub fn load_unlabeled(manifest: &Manifest, base: &Path, strict: bool) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::with_capacity(manifest.len());
    for row in &manifest.rows {
        match load_image(&resolve(base, &row.path)) {
            Ok(image) => out.push(ImageRecord {
                id: row.id.clone(),
                image,
                disc_box: row.disc_box,
            }),
            Err(e) if !strict => log::warn!("skipping {:?}: {e}", row.id),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SplitManifests {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Largest-remainder apportionment: integer shares per class that sum to
/// `total`, each within one of its real-valued quota.
fn apportion(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = total - shares.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        shares[i] += 1;
        leftover -= 1;
    }
    shares
}

/// Stratified, seeded, disjoint three-way split. `test_frac` of the whole
/// set goes to test (rounded up), then `val_frac` of the remaining
/// training pool goes to validation (rounded up); both are apportioned
/// over classes by largest remainder.
pub fn split_manifest(
    manifest: &Manifest,
    test_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<SplitManifests> {
    for frac in [test_frac, val_frac] {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::Config(format!("split fraction {frac} outside [0,1)")));
        }
    }
    let classes = manifest
        .classes()
        .ok_or_else(|| Error::Missing("split needs labeled rows".into()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, row) in manifest.rows.iter().enumerate() {
        let label = row.label.ok_or_else(|| {
            Error::Missing(format!("sample {:?} has no label; splits are stratified", row.id))
        })?;
        by_class[label].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Config(format!(
                "class {c} has {} samples; need at least 3 to split",
                members.len()
            )));
        }
    }
    let n = manifest.len();
    let test_total = (test_frac * n as f64).ceil() as usize;
    let test_shares = apportion(
        &by_class.iter().map(|m| test_frac * m.len() as f64).collect::<Vec<_>>(),
        test_total,
    );
    let train_pool: Vec<usize> =
        by_class.iter().zip(&test_shares).map(|(m, t)| m.len() - t).collect();
    let val_total = (val_frac * train_pool.iter().sum::<usize>() as f64).ceil() as usize;
    let val_shares = apportion(
        &train_pool.iter().map(|&m| val_frac * m as f64).collect::<Vec<_>>(),
        val_total,
    );

    let mut test_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        let mut rng = seed_stream(seed, &format!("split.class{c}"));
        shuffled.shuffle(&mut rng);
        let t = test_shares[c];
        let v = val_shares[c];
        test_idx.extend_from_slice(&shuffled[..t]);
        val_idx.extend_from_slice(&shuffled[t..t + v]);
        train_idx.extend_from_slice(&shuffled[t + v..]);
    }
    let pick = |mut idx: Vec<usize>| -> Manifest {
        idx.sort_unstable();
        Manifest { rows: idx.iter().map(|&i| manifest.rows[i].clone()).collect() }
    };
    Ok(SplitManifests { train: pick(train_idx), val: pick(val_idx), test: pick(test_idx) })
}
