//! Synthetic ordinal dataset: noisy background, a bright disc, and a
//! darker concentric cup whose radius ratio grows with the class index.
//! The cup-to-disc ratio is the single ordinal factor, so class k sits
//! geometrically between k-1 and k+1.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::write_png;
use crate::manifest::{Manifest, ManifestRow};
use crate::preprocess::DiscBox;
use crate::rng::seed_stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

const BG_LEVEL: f64 = 0.20;
const DISC_LEVEL: f64 = 0.85;
const CUP_LEVEL: f64 = 0.45;
const CHANNEL_GAINS: [f64; 3] = [1.0, 0.8, 0.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub h: usize,
    /// Disc radius as a fraction of the image side.
    pub disc_radius_frac: f64,
    /// Cup-to-disc ratio per class, strictly increasing.
    pub cdr_schedule: Vec<f64>,
    /// ± jitter added to the scheduled ratio.
    pub cdr_jitter: f64,
    /// ± relative jitter on the disc radius.
    pub radius_jitter: f64,
    /// ± center offset as a fraction of the image side.
    pub position_jitter: f64,
    /// ± relative jitter on disc and cup intensity.
    pub intensity_jitter: f64,
    /// Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 3,
            per_class: 200,
            h: 64,
            disc_radius_frac: 0.30,
            cdr_schedule: vec![0.30, 0.55, 0.80],
            cdr_jitter: 0.08,
            radius_jitter: 0.10,
            position_jitter: 0.05,
            intensity_jitter: 0.05,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if self.h < 16 {
            return Err(Error::Config("image side must be at least 16".into()));
        }
        if self.cdr_schedule.len() != self.classes {
            return Err(Error::Config(format!(
                "cdr schedule has {} entries for {} classes",
                self.cdr_schedule.len(),
                self.classes
            )));
        }
        if !self.cdr_schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("cdr schedule must be strictly increasing".into()));
        }
        if self.cdr_schedule.iter().any(|&r| r <= 0.0 || r >= 1.0) {
            return Err(Error::Config("cdr schedule values must sit in (0,1)".into()));
        }
        if !(0.0..=0.45).contains(&self.disc_radius_frac) || self.disc_radius_frac <= 0.0 {
            return Err(Error::Config("disc_radius_frac must sit in (0, 0.45]".into()));
        }
        for (name, v) in [
            ("cdr_jitter", self.cdr_jitter),
            ("radius_jitter", self.radius_jitter),
            ("position_jitter", self.position_jitter),
            ("intensity_jitter", self.intensity_jitter),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// A smaller spec for other class counts, same geometry defaults.
    pub fn with_classes(classes: usize, per_class: usize, seed: u64) -> Self {
        let schedule: Vec<f64> = (0..classes)
            .map(|k| 0.20 + 0.60 * k as f64 / (classes - 1) as f64)
            .collect();
        SynthSpec {
            classes,
            per_class,
            cdr_schedule: schedule,
            cdr_jitter: 0.05,
            seed,
            ..SynthSpec::default()
        }
    }
}

/// One rendered image plus its exact disc bounding box and the drawn
/// cup-to-disc ratio.
pub struct RenderedImage {
    pub image: Tensor,
    pub disc_box: DiscBox,
    pub cdr: f64,
}

fn signed(mag: f64, rng: &mut ChaCha12Rng) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * mag
}

/// Renders one image of the given class. Draw order is fixed: radius,
/// center x, center y, ratio, disc intensity, cup intensity, then one
/// noise value per pixel in row-major order.
pub fn render_image(spec: &SynthSpec, class: usize, rng: &mut ChaCha12Rng) -> Result<RenderedImage> {
    spec.validate()?;
    if class >= spec.classes {
        return Err(Error::Config(format!("class {class} out of range")));
    }
    let h = spec.h;
    let side = h as f64;
    let r_disc = spec.disc_radius_frac * side * (1.0 + signed(spec.radius_jitter, rng));
    let cx = side / 2.0 + signed(spec.position_jitter, rng) * side;
    let cy = side / 2.0 + signed(spec.position_jitter, rng) * side;
    let cdr = (spec.cdr_schedule[class] + signed(spec.cdr_jitter, rng)).clamp(0.05, 0.95);
    let disc_lvl = DISC_LEVEL * (1.0 + signed(spec.intensity_jitter, rng));
    let cup_lvl = CUP_LEVEL * (1.0 + signed(spec.intensity_jitter, rng));
    let r_cup = cdr * r_disc;
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;

    let mut data = vec![0.0; 3 * h * h];
    for y in 0..h {
        for x in 0..h {
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            // 1px linear edge so radii are measurable sub-pixel
            let cov_disc = (r_disc - d + 0.5).clamp(0.0, 1.0);
            let cov_cup = (r_cup - d + 0.5).clamp(0.0, 1.0);
            let gray = BG_LEVEL
                + (disc_lvl - BG_LEVEL) * cov_disc
                + (cup_lvl - disc_lvl) * cov_cup
                + noise.sample(rng);
            for (c, gain) in CHANNEL_GAINS.iter().enumerate() {
                data[c * h * h + y * h + x] = (gray * gain).clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::new(vec![3, h, h], data)?;
    let disc_box = DiscBox {
        x0: (cx - r_disc).floor().max(0.0) as u32,
        y0: (cy - r_disc).floor().max(0.0) as u32,
        x1: ((cx + r_disc).ceil() as u32).min(h as u32),
        y1: ((cy + r_disc).ceil() as u32).min(h as u32),
    };
    Ok(RenderedImage { image, disc_box, cdr })
}

/// All images of a dataset, in memory, without touching the filesystem.
pub fn generate_in_memory(spec: &SynthSpec) -> Result<Vec<(String, usize, RenderedImage)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        for i in 0..spec.per_class {
            let id = format!("c{class}_{i:04}");
            let mut rng = seed_stream(spec.seed, &format!("synth.{id}"));
            let rendered = render_image(spec, class, &mut rng)?;
            out.push((id, class, rendered));
        }
    }
    Ok(out)
}

/// Writes the dataset as PNGs plus `manifest.csv` into `dir` and returns
/// the manifest. Paths in the manifest are relative to `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (id, class, rendered) in generate_in_memory(spec)? {
        let file = format!("{id}.png");
        write_png(&dir.join(&file), &rendered.image)?;
        rows.push(ManifestRow {
            id,
            path: file,
            label: Some(class),
            disc_box: Some(rendered.disc_box),
        });
    }
    let manifest = Manifest { rows };
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Estimates the cup-to-disc ratio back from a rendered image by
/// thresholding channel 0 and comparing equivalent-circle radii.
pub fn measure_cdr(image: &Tensor) -> Option<f64> {
    let &[c, h, w] = image.shape() else { return None };
    if c == 0 {
        return None;
    }
    let plane = &image.data()[..h * w];
    let mut cup = 0usize;
    let mut ring = 0usize;
    for &v in plane {
        if v > 0.625 {
            ring += 1;
        } else if v > 0.30 {
            cup += 1;
        }
    }
    let disc_total = ring + cup;
    if disc_total == 0 || cup == 0 {
        return None;
    }
    let r_disc = (disc_total as f64 / std::f64::consts::PI).sqrt();
    let r_cup = (cup as f64 / std::f64::consts::PI).sqrt();
    Some(r_cup / r_disc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_schedules() {
        let mut spec = SynthSpec::default();
        spec.cdr_schedule = vec![0.3, 0.3, 0.8];
        assert!(spec.validate().is_err());
        spec.cdr_schedule = vec![0.3, 0.6];
        assert!(spec.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
        assert!(SynthSpec::with_classes(4, 10, 1).validate().is_ok());
        assert!(SynthSpec::with_classes(5, 10, 1).validate().is_ok());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec { per_class: 2, ..SynthSpec::default() };
        let a = generate_in_memory(&spec).unwrap();
        let b = generate_in_memory(&spec).unwrap();
        for ((ia, ca, ra), (ib, cb, rb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(ca, cb);
            assert_eq!(ra.disc_box, rb.disc_box);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ra.image), bits(&rb.image));
        }
    }

    #[test]
    fn generated_files_identical_across_runs() {
        let spec = SynthSpec { per_class: 2, ..SynthSpec::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate(&spec, d1.path()).unwrap();
        let m2 = generate(&spec, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            std::fs::read(d1.path().join("manifest.csv")).unwrap(),
            std::fs::read(d2.path().join("manifest.csv")).unwrap()
        );
        let name = format!("{}.png", m1.rows[0].id);
        assert_eq!(
            std::fs::read(d1.path().join(&name)).unwrap(),
            std::fs::read(d2.path().join(&name)).unwrap()
        );
    }

    #[test]
    fn zero_jitter_images_differ_only_at_the_cup() {
        let spec = SynthSpec {
            per_class: 1,
            cdr_jitter: 0.0,
            radius_jitter: 0.0,
            position_jitter: 0.0,
            intensity_jitter: 0.0,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let all = generate_in_memory(&spec).unwrap();
        let a = &all[0].2;
        let b = &all[2].2;
        assert_eq!(a.disc_box, b.disc_box);
        let h = spec.h;
        let center = h as f64 / 2.0;
        let r_disc = spec.disc_radius_frac * h as f64;
        let r_cup_max = spec.cdr_schedule[2] * r_disc;
        let mut differing = 0;
        for y in 0..h {
            for x in 0..h {
                let same = a.image.data()[y * h + x] == b.image.data()[y * h + x];
                let d = (x as f64 - center).hypot(y as f64 - center);
                if d > r_cup_max + 1.0 {
                    assert!(same, "pixel ({x},{y}) outside the cup changed");
                } else if !same {
                    differing += 1;
                }
            }
        }
        assert!(differing > 0);
    }

    #[test]
    fn measured_ratio_tracks_the_schedule() {
        let spec = SynthSpec { per_class: 30, ..SynthSpec::default() };
        let all = generate_in_memory(&spec).unwrap();
        let mut sums = vec![0.0; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for (_, class, rendered) in &all {
            let m = measure_cdr(&rendered.image).expect("disc visible");
            sums[*class] += m;
            counts[*class] += 1;
        }
        let means: Vec<f64> =
            sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        for k in 1..spec.classes {
            assert!(
                means[k] > means[k - 1] + 0.05,
                "class means not increasing: {means:?}"
            );
        }
        // measured means land near the schedule
        for (m, s) in means.iter().zip(&spec.cdr_schedule) {
            assert!((m - s).abs() < 0.12, "measured {m} vs scheduled {s}");
        }
    }

    #[test]
    fn drawn_ratios_never_overlap_across_classes() {
        let spec = SynthSpec::default();
        let all = generate_in_memory(&spec).unwrap();
        let mut ranges = vec![(f64::MAX, f64::MIN); spec.classes];
        for (_, class, rendered) in &all {
            let r = &mut ranges[*class];
            r.0 = r.0.min(rendered.cdr);
            r.1 = r.1.max(rendered.cdr);
        }
        for k in 1..spec.classes {
            assert!(
                ranges[k].0 > ranges[k - 1].1,
                "class {k} range {:?} overlaps {:?}",
                ranges[k],
                ranges[k - 1]
            );
        }
    }

    #[test]
    fn nearest_neighbor_oracle_learns_the_dataset() {
        // 5-NN on raw pixels must clear 80% on a held-out fifth.
        let spec = SynthSpec::default();
        let all = generate_in_memory(&spec).unwrap();
        let mut train: Vec<(&Tensor, usize)> = Vec::new();
        let mut test: Vec<(&Tensor, usize)> = Vec::new();
        for (_, class, rendered) in &all {
            // per-class order is generation order; hold out the last fifth
            if test.iter().filter(|(_, c)| c == class).count()
                + train.iter().filter(|(_, c)| c == class).count()
                < spec.per_class * 4 / 5
            {
                train.push((&rendered.image, *class));
            } else {
                test.push((&rendered.image, *class));
            }
        }
        let mut correct = 0;
        for (img, label) in &test {
            let mut dists: Vec<(f64, usize)> = train
                .iter()
                .map(|(t, c)| {
                    let d: f64 = t
                        .data()
                        .iter()
                        .zip(img.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, *c)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut votes = vec![0usize; spec.classes];
            for (_, c) in &dists[..5] {
                votes[*c] += 1;
            }
            let best = votes.iter().max().unwrap();
            let pred = if votes.iter().filter(|&v| v == best).count() > 1 {
                dists[0].1
            } else {
                votes.iter().position(|v| v == best).unwrap()
            };
            if pred == *label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.80, "5-NN accuracy {acc}");
    }
}
