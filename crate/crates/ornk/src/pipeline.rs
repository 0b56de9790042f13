//! The second-stage pipeline: fused region channels are cached, glued
//! onto the inputs as a fourth channel, and a new ranking bank starts
//! from the first bank's weights. Prediction for unseen images computes
//! the region channel on the fly from the first bank; labels are never
//! consulted anywhere on the prediction path.

use std::collections::HashMap;

use crate::backbone::{transfer_weights, Backbone, BackboneConfig};
use crate::cam::{roi_for_image, RoiVariant, Upsample};
use crate::dataset::{ImageRecord, LabeledSample};
use crate::metrics::ConfusionMatrix;
use crate::preprocess::RegionKind;
use crate::ranking::{rank_inconsistent, ClassMapping, SubModelBank};
use crate::roi_cache::RoiCache;
use crate::augment::AugmentPolicy;
use crate::tensor::Tensor;
use crate::trainer::{train_bank, TrainOutcome, TrainSchedule};
use crate::{Error, Result};

pub use crate::trainer::{batch_ce_acc, cea_value, composite_loss};

/// Appends a region grid as channel 3 of a 3-channel image.
pub fn concat_roi(image: &Tensor, roi: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected [3,H,W] image, got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if roi.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "region grid {:?} does not match image {h}x{w}",
            roi.shape()
        )));
    }
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(image.data());
    data.extend_from_slice(roi.data());
    Tensor::new(vec![4, h, w], data)
}

/// Splits a 4-channel sample back into image and region grid.
pub fn split_roi(sample: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[c, h, w] = sample.shape() else {
        return Err(Error::Shape(format!("expected [4,H,W], got {:?}", sample.shape())));
    };
    if c != 4 {
        return Err(Error::Shape(format!("expected 4 channels, got {c}")));
    }
    let image = Tensor::new(vec![3, h, w], sample.data()[..3 * h * w].to_vec())?;
    let roi = Tensor::new(vec![h, w], sample.data()[3 * h * w..].to_vec())?;
    Ok((image, roi))
}

/// The second-stage architecture: identical to the first stage except
/// for one extra input channel.
pub fn final_config_from(primitive: &BackboneConfig) -> BackboneConfig {
    let mut config = primitive.clone();
    config.input_channels += 1;
    config
}

/// Computes and caches the fused region channel for every record whose
/// cache entry is absent or stale. Returns how many were computed.
pub fn extract_rois(
    primitive: &SubModelBank,
    records: &[ImageRecord],
    cache: &RoiCache,
    upsample: Upsample,
) -> Result<usize> {
    let mut written = 0;
    for record in records {
        if cache.load(&record.id).is_ok() {
            continue;
        }
        let roi = roi_for_image(primitive, &record.image, cache.variant(), upsample)?;
        cache.store(&record.id, &roi)?;
        written += 1;
    }
    Ok(written)
}

/// Builds the 4-channel training samples from cached region channels.
/// Every id must be present in the cache.
pub fn attach_cached_rois(samples: &[LabeledSample], cache: &RoiCache) -> Result<Vec<LabeledSample>> {
    cache.verify_complete(samples.iter().map(|s| s.id.as_str()))?;
    samples
        .iter()
        .map(|s| {
            let entry = cache.load(&s.id)?;
            Ok(LabeledSample {
                id: s.id.clone(),
                image: concat_roi(&s.image, &entry.values)?,
                label: s.label,
                disc_box: s.disc_box,
            })
        })
        .collect()
}

/// Trains the second-stage bank: one extra input channel, weights
/// transferred per sub-model from the first stage (the new channel's
/// first-layer weights start at zero), then the normal bank loop over
/// 4-channel samples. Train and validation ids must all be cached.
pub fn train_final(
    primitive: &SubModelBank,
    cache: &RoiCache,
    train: &[LabeledSample],
    val: &[LabeledSample],
    schedule: &TrainSchedule,
    policy: &AugmentPolicy,
    seed: u64,
    workers: usize,
) -> Result<(SubModelBank, Vec<TrainOutcome>)> {
    let n = primitive.n();
    let final_config = final_config_from(primitive.config());
    let mut bank = SubModelBank::build(&final_config, n, seed)?;
    for k in 1..n {
        transfer_weights(primitive.model(k), bank.model_mut(k))?;
    }
    let train4 = attach_cached_rois(train, cache)?;
    let val4 = attach_cached_rois(val, cache)?;
    let outcomes = train_bank(&mut bank, &train4, &val4, schedule, policy, seed, "final", workers)?;
    Ok((bank, outcomes))
}

fn roi_values_for(
    primitive: &SubModelBank,
    record: &ImageRecord,
    variant: RoiVariant,
    upsample: Upsample,
    cache: Option<&RoiCache>,
) -> Result<Tensor> {
    if let Some(cache) = cache {
        match cache.load(&record.id) {
            Ok(entry) => return Ok(entry.values),
            Err(Error::Missing(_)) => {}
            Err(other) => return Err(other),
        }
    }
    Ok(roi_for_image(primitive, &record.image, variant, upsample)?.values)
}

/// Predicts a class for one unlabeled record: fetch or compute the
/// region channel, concatenate, and aggregate the second-stage votes.
pub fn predict_final(
    final_bank: &SubModelBank,
    primitive: &SubModelBank,
    record: &ImageRecord,
    variant: RoiVariant,
    upsample: Upsample,
    cache: Option<&RoiCache>,
) -> Result<usize> {
    let roi = roi_values_for(primitive, record, variant, upsample, cache)?;
    let x4 = concat_roi(&record.image, &roi)?;
    Ok(final_bank.aggregate(&x4)?.0)
}

/// Batched prediction over many records, returning each record's class
/// and vote bits.
pub fn predict_final_all(
    final_bank: &SubModelBank,
    primitive: &SubModelBank,
    records: &[ImageRecord],
    variant: RoiVariant,
    upsample: Upsample,
    cache: Option<&RoiCache>,
) -> Result<Vec<(usize, Vec<u8>)>> {
    let mut inputs = Vec::with_capacity(records.len());
    for record in records {
        let roi = roi_values_for(primitive, record, variant, upsample, cache)?;
        inputs.push(concat_roi(&record.image, &roi)?);
    }
    final_bank.aggregate_batch(&inputs)
}

/// Majority vote over per-region predictions. Without a strict majority
/// the disc region decides; a tie with no disc prediction is an error,
/// as is any duplicated region.
pub fn ensemble_vote(votes: &[(RegionKind, usize)]) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::Config("ensemble needs at least one prediction".into()));
    }
    let mut seen = Vec::new();
    for (region, _) in votes {
        if seen.contains(&region) {
            return Err(Error::Config(format!("two predictions for the {} region", region.label())));
        }
        seen.push(region);
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &(_, class) in votes {
        *counts.entry(class).or_insert(0) += 1;
    }
    let best = counts.iter().max_by_key(|&(_, c)| c).map(|(&class, &c)| (class, c));
    if let Some((class, count)) = best {
        if 2 * count > votes.len() {
            return Ok(class);
        }
    }
    votes
        .iter()
        .find(|(region, _)| *region == RegionKind::Disc)
        .map(|&(_, class)| class)
        .ok_or_else(|| {
            Error::Missing("no majority and no disc prediction to break the tie".into())
        })
}

/// How often the bank's vote bits were not monotone non-increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankDiagnostic {
    pub inconsistent: usize,
    pub total: usize,
}

impl RankDiagnostic {
    fn tally(results: &[(usize, Vec<u8>)]) -> Self {
        RankDiagnostic {
            inconsistent: results.iter().filter(|(_, bits)| rank_inconsistent(bits)).count(),
            total: results.len(),
        }
    }
}

/// First-stage bank evaluated directly against the ordinal labels.
/// Returns the matrix, the inconsistency tally, and the per-sample
/// predictions in test order.
pub fn evaluate_rank_bank(
    bank: &SubModelBank,
    test: &[LabeledSample],
) -> Result<(ConfusionMatrix, RankDiagnostic, Vec<usize>)> {
    let images: Vec<Tensor> = test.iter().map(|s| s.image.clone()).collect();
    let results = bank.aggregate_batch(&images)?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let predicted: Vec<usize> = results.iter().map(|&(p, _)| p).collect();
    let cm = ConfusionMatrix::from_labels(bank.n(), &truth, &predicted)?;
    Ok((cm, RankDiagnostic::tally(&results), predicted))
}

/// Second-stage bank evaluated end to end. The test samples' labels are
/// only used to fill the confusion matrix; prediction sees records.
pub fn evaluate_final_bank(
    final_bank: &SubModelBank,
    primitive: &SubModelBank,
    test: &[LabeledSample],
    variant: RoiVariant,
    upsample: Upsample,
    cache: Option<&RoiCache>,
) -> Result<(ConfusionMatrix, RankDiagnostic, Vec<usize>)> {
    let records: Vec<ImageRecord> = test.iter().map(|s| s.record()).collect();
    let results = predict_final_all(final_bank, primitive, &records, variant, upsample, cache)?;
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let predicted: Vec<usize> = results.iter().map(|&(p, _)| p).collect();
    let cm = ConfusionMatrix::from_labels(final_bank.n(), &truth, &predicted)?;
    Ok((cm, RankDiagnostic::tally(&results), predicted))
}

/// Multi-class or merged baseline evaluated against mapped labels.
/// Returns the matrix along with the per-sample predictions in test order.
pub fn evaluate_multiclass_model(
    model: &Backbone,
    test: &[LabeledSample],
    mapping: ClassMapping,
    n: usize,
) -> Result<(ConfusionMatrix, Vec<usize>)> {
    let classes = mapping.classes(n);
    let mut cm = ConfusionMatrix::new(classes)?;
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in test.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].image.numel());
        for s in chunk {
            data.extend_from_slice(s.image.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].image.shape());
        let (_, probs) = model.forward_batch(&Tensor::new(shape, data)?)?;
        for (row, s) in probs.data().chunks(classes).zip(chunk) {
            let guess = crate::backbone::argmax_lowest(row);
            cm.record(mapping.apply(s.label, n)?, guess)?;
            predicted.push(guess);
        }
    }
    Ok((cm, predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{HeadKind, Stage};
    use crate::ranking::relabel;
    use crate::trainer::{evaluate_model, LossKind};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            input_channels: 3,
            input_size: 16,
            stages: vec![Stage { filters: 4, convs: 1 }, Stage { filters: 6, convs: 1 }],
            head: HeadKind::GapSoftmax,
            classes: 2,
            batch_norm: true,
        }
    }

    fn random_samples(count: usize, classes: usize, seed: u64) -> Vec<LabeledSample> {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| LabeledSample {
                id: format!("p{i}"),
                image: Tensor::new(
                    vec![3, 16, 16],
                    (0..3 * 256).map(|_| r.random::<f64>()).collect(),
                )
                .unwrap(),
                label: i % classes,
                disc_box: None,
            })
            .collect()
    }

    #[test]
    fn concat_and_split_round_trip() {
        let mut r = ChaCha12Rng::seed_from_u64(1);
        let image =
            Tensor::new(vec![3, 4, 4], (0..48).map(|_| r.random::<f64>()).collect()).unwrap();
        let roi = Tensor::new(vec![4, 4], (0..16).map(|_| r.random::<f64>()).collect()).unwrap();
        let x4 = concat_roi(&image, &roi).unwrap();
        assert_eq!(x4.shape(), [4, 4, 4]);
        let (back_img, back_roi) = split_roi(&x4).unwrap();
        assert_eq!(back_img.data(), image.data());
        assert_eq!(back_roi.data(), roi.data());

        let zero = concat_roi(&image, &Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(&zero.data()[..48], image.data());
        assert!(zero.data()[48..].iter().all(|&v| v == 0.0));

        assert!(concat_roi(&image, &Tensor::zeros(&[5, 5])).is_err());
        assert!(split_roi(&image).is_err());
    }

    #[test]
    fn final_config_adds_one_channel() {
        let config = tiny_config();
        let final_config = final_config_from(&config);
        assert_eq!(final_config.input_channels, 4);
        assert_eq!(final_config.stages, config.stages);
        assert_eq!(final_config.classes, config.classes);
    }

    #[test]
    fn ensemble_examples() {
        use RegionKind::{Disc, Edisc, Original};
        assert_eq!(ensemble_vote(&[(Disc, 1), (Edisc, 1), (Original, 2)]).unwrap(), 1);
        assert_eq!(ensemble_vote(&[(Disc, 0), (Edisc, 1), (Original, 2)]).unwrap(), 0);
        assert_eq!(ensemble_vote(&[(Disc, 2), (Edisc, 2), (Original, 2)]).unwrap(), 2);
        // majority without disc is fine; a three-way tie without disc is not
        assert_eq!(ensemble_vote(&[(Edisc, 1), (Original, 1)]).unwrap(), 1);
        assert!(ensemble_vote(&[(Edisc, 1), (Original, 2)]).is_err());
        assert!(ensemble_vote(&[(Disc, 1), (Disc, 2)]).is_err());
        assert!(ensemble_vote(&[]).is_err());
    }

    #[test]
    fn transferred_bank_with_zero_roi_matches_primitive() {
        let primitive = SubModelBank::build(&tiny_config(), 3, 41).unwrap();
        let mut final_bank = SubModelBank::build(&final_config_from(&tiny_config()), 3, 41).unwrap();
        for k in 1..3 {
            transfer_weights(primitive.model(k), final_bank.model_mut(k)).unwrap();
        }
        let samples = random_samples(12, 3, 42);
        for s in &samples {
            let x4 = concat_roi(&s.image, &Tensor::zeros(&[16, 16])).unwrap();
            assert_eq!(
                final_bank.aggregate(&x4).unwrap(),
                primitive.aggregate(&s.image).unwrap()
            );
        }
        // relabeled validation accuracy matches sub-model for sub-model
        for k in 1..3 {
            let rel = relabel(&samples, k, 3).unwrap();
            let with_roi: Vec<LabeledSample> = rel
                .iter()
                .map(|s| LabeledSample {
                    id: s.id.clone(),
                    image: concat_roi(&s.image, &Tensor::zeros(&[16, 16])).unwrap(),
                    label: s.label,
                    disc_box: None,
                })
                .collect();
            let (l3, a3) =
                evaluate_model(primitive.model(k), &rel, LossKind::Ce, 0.1).unwrap();
            let (l4, a4) =
                evaluate_model(final_bank.model(k), &with_roi, LossKind::Ce, 0.1).unwrap();
            assert_eq!(a3, a4);
            assert!((l3 - l4).abs() < 1e-9);
        }
    }

    #[test]
    fn cached_and_on_the_fly_predictions_agree() {
        let dir = tempfile::tempdir().unwrap();
        let primitive = SubModelBank::build(&tiny_config(), 3, 51).unwrap();
        let mut final_bank = SubModelBank::build(&final_config_from(&tiny_config()), 3, 51).unwrap();
        for k in 1..3 {
            transfer_weights(primitive.model(k), final_bank.model_mut(k)).unwrap();
        }
        let samples = random_samples(6, 3, 52);
        let records: Vec<ImageRecord> = samples.iter().map(|s| s.record()).collect();
        let cache = RoiCache::open(
            dir.path(),
            primitive.content_hash().unwrap(),
            RoiVariant::Standard,
        )
        .unwrap();
        let written =
            extract_rois(&primitive, &records, &cache, Upsample::Bilinear).unwrap();
        assert_eq!(written, 6);
        // second pass finds everything fresh
        assert_eq!(extract_rois(&primitive, &records, &cache, Upsample::Bilinear).unwrap(), 0);

        for record in &records {
            let cached = predict_final(
                &final_bank,
                &primitive,
                record,
                RoiVariant::Standard,
                Upsample::Bilinear,
                Some(&cache),
            )
            .unwrap();
            let fly = predict_final(
                &final_bank,
                &primitive,
                record,
                RoiVariant::Standard,
                Upsample::Bilinear,
                None,
            )
            .unwrap();
            assert_eq!(cached, fly);
        }

        // unseen record: cache misses, prediction still works
        let unseen = ImageRecord {
            id: "unseen".into(),
            image: random_samples(1, 3, 53)[0].image.clone(),
            disc_box: None,
        };
        let with_cache = predict_final(
            &final_bank,
            &primitive,
            &unseen,
            RoiVariant::Standard,
            Upsample::Bilinear,
            Some(&cache),
        )
        .unwrap();
        let without = predict_final(
            &final_bank,
            &primitive,
            &unseen,
            RoiVariant::Standard,
            Upsample::Bilinear,
            None,
        )
        .unwrap();
        assert_eq!(with_cache, without);
    }

    #[test]
    fn train_final_requires_complete_cache() {
        let dir = tempfile::tempdir().unwrap();
        let primitive = SubModelBank::build(&tiny_config(), 3, 61).unwrap();
        let cache = RoiCache::open(
            dir.path(),
            primitive.content_hash().unwrap(),
            RoiVariant::Standard,
        )
        .unwrap();
        let samples = random_samples(6, 3, 62);
        let records: Vec<ImageRecord> = samples[..3].iter().map(|s| s.record()).collect();
        extract_rois(&primitive, &records, &cache, Upsample::Bilinear).unwrap();
        let schedule = TrainSchedule {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainSchedule::default()
        };
        let err = train_final(
            &primitive,
            &cache,
            &samples,
            &samples,
            &schedule,
            &AugmentPolicy::identity(),
            61,
            1,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Missing(_)));
        assert!(msg.contains("p3") && msg.contains("p4"), "{msg}");
    }

    #[test]
    fn train_final_runs_and_improves_on_cached_channels() {
        let dir = tempfile::tempdir().unwrap();
        let primitive = SubModelBank::build(&tiny_config(), 3, 71).unwrap();
        let cache = RoiCache::open(
            dir.path(),
            primitive.content_hash().unwrap(),
            RoiVariant::Standard,
        )
        .unwrap();
        let samples = random_samples(8, 2, 72);
        let records: Vec<ImageRecord> = samples.iter().map(|s| s.record()).collect();
        extract_rois(&primitive, &records, &cache, Upsample::Bilinear).unwrap();
        let schedule = TrainSchedule {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            loss: LossKind::Cea,
            ..TrainSchedule::default()
        };
        let (bank, outcomes) = train_final(
            &primitive,
            &cache,
            &samples,
            &samples,
            &schedule,
            &AugmentPolicy::identity(),
            71,
            1,
        )
        .unwrap();
        assert_eq!(outcomes.len(), 2);
        assert_eq!(bank.config().input_channels, 4);
        assert!(bank.val_loss().iter().all(Option::is_some));
        // reruns are deterministic
        let (bank2, _) = train_final(
            &primitive,
            &cache,
            &samples,
            &samples,
            &schedule,
            &AugmentPolicy::identity(),
            71,
            1,
        )
        .unwrap();
        assert_eq!(bank.content_hash().unwrap(), bank2.content_hash().unwrap());
    }

    #[test]
    fn rank_bank_evaluation_fills_the_matrix() {
        let bank = SubModelBank::build(&tiny_config(), 3, 81).unwrap();
        let samples = random_samples(9, 3, 82);
        let (cm, diag, preds) = evaluate_rank_bank(&bank, &samples).unwrap();
        assert_eq!(cm.total(), 9);
        assert_eq!(preds.len(), 9);
        assert_eq!(diag.total, 9);
        assert!(diag.inconsistent <= diag.total);
    }

    #[test]
    fn multiclass_evaluation_maps_labels() {
        let mut config = tiny_config();
        config.classes = 2;
        let model = Backbone::build(config, &mut ChaCha12Rng::seed_from_u64(91)).unwrap();
        let samples = random_samples(9, 3, 92);
        let (cm, preds) =
            evaluate_multiclass_model(&model, &samples, ClassMapping::MergeHigh, 3).unwrap();
        assert_eq!(cm.classes(), 2);
        assert_eq!(cm.total(), 9);
        assert_eq!(preds.len(), 9);
        // truth row 0 holds only original class 0 (3 of 9 samples)
        assert_eq!(cm.row_total(0), 3);
        assert_eq!(cm.row_total(1), 6);
    }
}
