//! Runs the full comparison: every requested method trained per region
//! on shared splits, backbone, and schedule, scored on the held-out test
//! split, with an extra cross-region majority-vote row when more than
//! one region is configured. Stages communicate only through artifacts
//! under the region directory (banks, checkpoints, the region-channel
//! cache, curve CSVs), so they can run separately or composed, and every
//! artifact is byte-stable for a fixed seed and config.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::backbone::{Backbone, BackboneConfig};
use crate::cam::{RoiVariant, Upsample};
use crate::dataset::{load_labeled, LabeledSample, SplitManifests};
use crate::metrics::{metrics, render_report, ConfusionMatrix, MetricsReport};
use crate::pipeline::{
    ensemble_vote, evaluate_final_bank, evaluate_multiclass_model, evaluate_rank_bank,
    extract_rois, train_final, RankDiagnostic,
};
use crate::preprocess::{preprocess, RegionKind, RegionSpec};
use crate::ranking::{ClassMapping, SubModelBank};
use crate::rng::seed_stream;
use crate::roi_cache::RoiCache;
use crate::trainer::{
    save_curves, train_bank, train_multiclass, LossKind, TrainSchedule,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    /// Two-stage ranking bank with the fused region channel.
    Trk,
    /// The first-stage ranking bank evaluated directly.
    Rk,
    /// Single softmax head over all classes.
    Mc,
    /// Binary collapse: class 0 against everything else.
    Mc1,
    /// Binary collapse: the top class against everything else.
    Mc2,
}

impl MethodName {
    pub const ALL: [MethodName; 5] =
        [MethodName::Trk, MethodName::Rk, MethodName::Mc, MethodName::Mc1, MethodName::Mc2];

    pub fn label(&self) -> &'static str {
        match self {
            MethodName::Trk => "trk",
            MethodName::Rk => "rk",
            MethodName::Mc => "mc",
            MethodName::Mc1 => "mc1",
            MethodName::Mc2 => "mc2",
        }
    }

    pub fn parse(s: &str) -> Result<MethodName> {
        let key = s.trim().to_ascii_lowercase();
        MethodName::ALL
            .into_iter()
            .find(|m| m.label() == key)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (try trk, rk, mc, mc1, mc2)")))
    }

    /// Parses a comma-separated method list, e.g. "trk,rk,mc".
    pub fn parse_list(s: &str) -> Result<Vec<MethodName>> {
        let methods: Vec<MethodName> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(MethodName::parse)
            .collect::<Result<_>>()?;
        if methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        for (i, m) in methods.iter().enumerate() {
            if methods[..i].contains(m) {
                return Err(Error::Config(format!("method {} listed twice", m.label())));
            }
        }
        Ok(methods)
    }
}

/// Report label for the two-stage method under its effective settings.
/// The plain label means standard region channel with the accuracy-aware
/// loss; deviations are suffixed so variant rows stay distinguishable.
pub fn trk_label(variant: RoiVariant, final_loss: LossKind) -> String {
    let mut label = String::from("trk");
    if variant == RoiVariant::Swapped {
        label.push_str("_swapped");
    }
    if final_loss == LossKind::Ce {
        label.push_str("_ce");
    }
    label
}

/// Class names used in report columns: "N,S,G" for three classes, else
/// "C0..C{n-1}".
pub fn default_class_names(n: usize) -> Vec<String> {
    if n == 3 {
        vec!["N".into(), "S".into(), "G".into()]
    } else {
        (0..n).map(|c| format!("C{c}")).collect()
    }
}

/// Everything a single run needs beyond the dataset itself.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub n: usize,
    pub class_names: Vec<String>,
    pub backbone: BackboneConfig,
    pub primitive_schedule: TrainSchedule,
    pub final_schedule: TrainSchedule,
    pub policy: AugmentPolicy,
    pub methods: Vec<MethodName>,
    pub regions: Vec<RegionSpec>,
    pub variant: RoiVariant,
    pub upsample: Upsample,
    pub seed: u64,
    pub workers: usize,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("need at least 3 ordered classes, got {}", self.n)));
        }
        if self.class_names.len() != self.n {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.n
            )));
        }
        self.backbone.validate()?;
        if self.backbone.classes != 2 {
            return Err(Error::Config(
                "the shared backbone must have a binary head; baselines widen it as needed".into(),
            ));
        }
        self.primitive_schedule.validate()?;
        self.final_schedule.validate()?;
        self.policy.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {} listed twice", m.label())));
            }
        }
        if self.regions.is_empty() {
            return Err(Error::Config("no regions requested".into()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            r.validate()?;
            if self.regions[..i].iter().any(|p| p.kind == r.kind) {
                return Err(Error::Config(format!("region {} listed twice", r.kind.label())));
            }
        }
        Ok(())
    }

    fn method_label(&self, method: MethodName) -> String {
        match method {
            MethodName::Trk => trk_label(self.variant, self.final_schedule.loss),
            other => other.label().to_string(),
        }
    }

    /// Positive-class column names for one method's report row.
    fn positive_names(&self, method: MethodName) -> Vec<String> {
        match method {
            MethodName::Trk | MethodName::Rk | MethodName::Mc => self.class_names[1..].to_vec(),
            MethodName::Mc1 => vec![self.class_names[1..].join("+")],
            MethodName::Mc2 => vec![self.class_names[self.n - 1].clone()],
        }
    }

    fn baseline_mapping(method: MethodName) -> Result<ClassMapping> {
        match method {
            MethodName::Mc => Ok(ClassMapping::Identity),
            MethodName::Mc1 => Ok(ClassMapping::MergeHigh),
            MethodName::Mc2 => Ok(ClassMapping::MergeLow),
            other => Err(Error::Config(format!(
                "{} is not a single-model baseline",
                other.label()
            ))),
        }
    }
}

/// One region's view of the three splits, already cropped and resized.
#[derive(Debug, Clone)]
pub struct RegionData {
    pub spec: RegionSpec,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn preprocess_samples(
    samples: Vec<LabeledSample>,
    spec: &RegionSpec,
    target: usize,
) -> Result<Vec<LabeledSample>> {
    samples
        .into_iter()
        .map(|s| {
            let image = preprocess(&s.image, spec, s.disc_box.as_ref(), target)?;
            Ok(LabeledSample { image, ..s })
        })
        .collect()
}

/// Loads the three split manifests and crops every image to `spec`.
pub fn prepare_region(
    spec: &RegionSpec,
    splits: &SplitManifests,
    base: &Path,
    target: usize,
) -> Result<RegionData> {
    let load = |m| load_labeled(m, base, true);
    Ok(RegionData {
        spec: *spec,
        train: preprocess_samples(load(&splits.train)?, spec, target)?,
        val: preprocess_samples(load(&splits.val)?, spec, target)?,
        test: preprocess_samples(load(&splits.test)?, spec, target)?,
    })
}

/// The training stream seed for one region, derived so regions are
/// independent but the whole run is a function of the plan seed.
pub fn region_seed(seed: u64, region: &str) -> u64 {
    seed_stream(seed, &format!("region.{region}")).random()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn load_primitive(dir: &Path) -> Result<SubModelBank> {
    let path = dir.join("primitive.bank");
    if !path.join("manifest.json").is_file() {
        return Err(Error::Missing(format!(
            "no first-stage bank at {}; run train-primitive (or end2end) first",
            path.display()
        )));
    }
    SubModelBank::load(path)
}

fn load_final(dir: &Path) -> Result<SubModelBank> {
    let path = dir.join("final.bank");
    if !path.join("manifest.json").is_file() {
        return Err(Error::Missing(format!(
            "no second-stage bank at {}; run train-final (or end2end) first",
            path.display()
        )));
    }
    SubModelBank::load(path)
}

fn open_cache(plan: &ExperimentPlan, primitive: &SubModelBank, dir: &Path) -> Result<RoiCache> {
    RoiCache::open(
        dir.join(format!("roi.{}", plan.variant.label())),
        primitive.content_hash()?,
        plan.variant,
    )
}

/// Trains the first-stage bank for one region and writes
/// `primitive.bank` plus per-sub-model curve CSVs under `dir`.
pub fn train_primitive_stage(
    plan: &ExperimentPlan,
    data: &RegionData,
    dir: &Path,
) -> Result<SubModelBank> {
    ensure_dir(dir)?;
    let seed = region_seed(plan.seed, data.spec.kind.label());
    let mut bank = SubModelBank::build(&plan.backbone, plan.n, seed)?;
    let outcomes = train_bank(
        &mut bank,
        &data.train,
        &data.val,
        &plan.primitive_schedule,
        &plan.policy,
        seed,
        "prim",
        plan.workers,
    )?;
    for (k, outcome) in (1..plan.n).zip(&outcomes) {
        save_curves(dir.join(format!("primitive.sub{k}.csv")), &outcome.curves)?;
    }
    bank.save(dir.join("primitive.bank"))?;
    Ok(bank)
}

/// Computes and caches the fused region channel for every train and
/// validation sample. Needs the first-stage bank on disk. Returns how
/// many entries were newly written.
pub fn extract_roi_stage(plan: &ExperimentPlan, data: &RegionData, dir: &Path) -> Result<usize> {
    let primitive = load_primitive(dir)?;
    let cache = open_cache(plan, &primitive, dir)?;
    let records: Vec<_> = data.train.iter().chain(&data.val).map(|s| s.record()).collect();
    extract_rois(&primitive, &records, &cache, plan.upsample)
}

/// Trains the second-stage bank from the cached region channels and
/// writes `final.bank` plus curve CSVs. The cache must already cover
/// every train and validation id.
pub fn train_final_stage(
    plan: &ExperimentPlan,
    data: &RegionData,
    dir: &Path,
) -> Result<SubModelBank> {
    let primitive = load_primitive(dir)?;
    let cache = open_cache(plan, &primitive, dir)?;
    let ids = data.train.iter().chain(&data.val).map(|s| s.id.as_str());
    cache.verify_complete(ids).map_err(|e| match e {
        Error::Missing(detail) => {
            Error::Missing(format!("{detail}; run extract-roi before train-final"))
        }
        other => other,
    })?;
    let seed = region_seed(plan.seed, data.spec.kind.label());
    let (bank, outcomes) = train_final(
        &primitive,
        &cache,
        &data.train,
        &data.val,
        &plan.final_schedule,
        &plan.policy,
        seed,
        plan.workers,
    )?;
    for (k, outcome) in (1..plan.n).zip(&outcomes) {
        save_curves(dir.join(format!("final.sub{k}.csv")), &outcome.curves)?;
    }
    bank.save(dir.join("final.bank"))?;
    Ok(bank)
}

/// Trains one baseline. The one-stage ranking baseline is the
/// first-stage bank itself; the others are single softmax models saved
/// as `{label}.ck`.
pub fn train_baseline_stage(
    plan: &ExperimentPlan,
    method: MethodName,
    data: &RegionData,
    dir: &Path,
) -> Result<()> {
    if method == MethodName::Trk {
        return Err(Error::Config(
            "trk is the staged pipeline; run train-primitive, extract-roi, train-final".into(),
        ));
    }
    if method == MethodName::Rk {
        train_primitive_stage(plan, data, dir)?;
        return Ok(());
    }
    ensure_dir(dir)?;
    let mapping = ExperimentPlan::baseline_mapping(method)?;
    let label = method.label();
    let seed = region_seed(plan.seed, data.spec.kind.label());
    let (model, outcome) = train_multiclass(
        &plan.backbone,
        plan.n,
        mapping,
        &data.train,
        &data.val,
        &plan.primitive_schedule,
        &plan.policy,
        seed,
        label,
    )?;
    save_curves(dir.join(format!("{label}.csv")), &outcome.curves)?;
    model.save(dir.join(format!("{label}.ck")))
}

/// One trained-and-scored method within a region.
#[derive(Debug, Clone)]
pub struct MethodEval {
    pub method: String,
    pub base: MethodName,
    pub cm: ConfusionMatrix,
    /// Test-split predictions in manifest order (mapped classes for the
    /// binary collapses).
    pub predictions: Vec<usize>,
    pub diagnostic: Option<RankDiagnostic>,
}

#[derive(Debug, Clone)]
pub struct RegionOutcome {
    pub region: String,
    pub evals: Vec<MethodEval>,
}

/// Scores every requested method against the test split using the
/// artifacts already present under `dir`; trains nothing.
pub fn eval_region(plan: &ExperimentPlan, data: &RegionData, dir: &Path) -> Result<RegionOutcome> {
    let mut evals = Vec::new();
    for &method in &plan.methods {
        let label = plan.method_label(method);
        let eval = match method {
            MethodName::Rk => {
                let bank = load_primitive(dir)?;
                let (cm, diag, predictions) = evaluate_rank_bank(&bank, &data.test)?;
                MethodEval { method: label, base: method, cm, predictions, diagnostic: Some(diag) }
            }
            MethodName::Trk => {
                let primitive = load_primitive(dir)?;
                let final_bank = load_final(dir)?;
                let cache = open_cache(plan, &primitive, dir)?;
                let (cm, diag, predictions) = evaluate_final_bank(
                    &final_bank,
                    &primitive,
                    &data.test,
                    plan.variant,
                    plan.upsample,
                    Some(&cache),
                )?;
                MethodEval { method: label, base: method, cm, predictions, diagnostic: Some(diag) }
            }
            MethodName::Mc | MethodName::Mc1 | MethodName::Mc2 => {
                let path = dir.join(format!("{label}.ck"));
                if !path.is_file() {
                    return Err(Error::Missing(format!(
                        "no {label} checkpoint at {}; run train-baseline {label} first",
                        path.display()
                    )));
                }
                let model = Backbone::load(path)?;
                let mapping = ExperimentPlan::baseline_mapping(method)?;
                let (cm, predictions) =
                    evaluate_multiclass_model(&model, &data.test, mapping, plan.n)?;
                MethodEval { method: label, base: method, cm, predictions, diagnostic: None }
            }
        };
        evals.push(eval);
    }
    Ok(RegionOutcome { region: data.spec.kind.label().to_string(), evals })
}

/// Trains and evaluates every requested method on one region's data by
/// composing the stage functions in order. The first-stage bank is
/// trained once and shared by the one-stage and two-stage ranking
/// methods.
pub fn run_region(plan: &ExperimentPlan, data: &RegionData, dir: &Path) -> Result<RegionOutcome> {
    ensure_dir(dir)?;
    if plan.methods.iter().any(|m| matches!(m, MethodName::Trk | MethodName::Rk)) {
        train_primitive_stage(plan, data, dir)?;
    }
    if plan.methods.contains(&MethodName::Trk) {
        extract_roi_stage(plan, data, dir)?;
        train_final_stage(plan, data, dir)?;
    }
    for &method in &plan.methods {
        if matches!(method, MethodName::Mc | MethodName::Mc1 | MethodName::Mc2) {
            train_baseline_stage(plan, method, data, dir)?;
        }
    }
    eval_region(plan, data, dir)
}

/// Results of a whole run: one report row per method per region, plus a
/// majority-vote row per method when several regions are configured.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub reports: Vec<MetricsReport>,
    pub table: String,
    pub csv: String,
}

impl ExperimentSummary {
    /// "method (region)" -> accuracy, for quick run summaries.
    pub fn headline(&self) -> Vec<(String, f64)> {
        self.reports
            .iter()
            .filter_map(|r| {
                r.acc.map(|a| (format!("{} ({})", r.method, r.region), crate::metrics::round2(a)))
            })
            .collect()
    }

    pub fn accuracy(&self, method: &str, region: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.method == method && r.region == region).and_then(|r| r.acc)
    }
}

fn mapped_truth(base: MethodName, labels: &[usize], n: usize) -> Result<Vec<usize>> {
    let mapping = match base {
        MethodName::Mc1 => ClassMapping::MergeHigh,
        MethodName::Mc2 => ClassMapping::MergeLow,
        _ => ClassMapping::Identity,
    };
    labels.iter().map(|&l| mapping.apply(l, n)).collect()
}

/// Per-method majority vote across regions, tallied against the (mapped)
/// test labels. Ties fall to the disc region inside `ensemble_vote`.
fn ensemble_evals(
    plan: &ExperimentPlan,
    outcomes: &[RegionOutcome],
    test_labels: &[usize],
) -> Result<Vec<MethodEval>> {
    let first = &outcomes[0];
    let mut evals = Vec::new();
    for eval in &first.evals {
        let per_region: Vec<(RegionKind, &[usize])> = outcomes
            .iter()
            .zip(&plan.regions)
            .map(|(o, spec)| {
                let found = o
                    .evals
                    .iter()
                    .find(|e| e.method == eval.method)
                    .expect("every region ran the same method list");
                (spec.kind, found.predictions.as_slice())
            })
            .collect();
        let truth = mapped_truth(eval.base, test_labels, plan.n)?;
        let mut predictions = Vec::with_capacity(truth.len());
        for i in 0..truth.len() {
            let votes: Vec<(RegionKind, usize)> =
                per_region.iter().map(|&(kind, preds)| (kind, preds[i])).collect();
            predictions.push(ensemble_vote(&votes)?);
        }
        let classes = match eval.base {
            MethodName::Mc1 | MethodName::Mc2 => 2,
            _ => plan.n,
        };
        let cm = ConfusionMatrix::from_labels(classes, &truth, &predictions)?;
        evals.push(MethodEval {
            method: eval.method.clone(),
            base: eval.base,
            cm,
            predictions,
            diagnostic: None,
        });
    }
    Ok(evals)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Turns per-region outcomes into the combined artifacts under `out`:
/// `metrics.csv` and `report.txt` with one row per method/region pair
/// (plus ensemble rows for multi-region runs), per-pair confusion
/// matrices under `confusion/`, and a `diagnostics.csv` of
/// rank-inconsistency tallies.
pub fn summarize_outcomes(
    plan: &ExperimentPlan,
    outcomes: &[RegionOutcome],
    test_labels: &[usize],
    out: &Path,
) -> Result<ExperimentSummary> {
    let mut rows: Vec<(String, MethodEval)> = Vec::new();
    for outcome in outcomes {
        for eval in &outcome.evals {
            rows.push((outcome.region.clone(), eval.clone()));
        }
    }
    if outcomes.len() > 1 {
        for eval in ensemble_evals(plan, outcomes, test_labels)? {
            rows.push(("ensemble".into(), eval));
        }
    }

    let confusion_dir = out.join("confusion");
    ensure_dir(&confusion_dir)?;
    let mut reports = Vec::with_capacity(rows.len());
    let mut diagnostics = String::from("method,region,rank_inconsistent,total\n");
    for (region, eval) in &rows {
        let names = plan.positive_names(eval.base);
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        reports.push(metrics(&eval.cm, &name_refs, &eval.method, region)?);
        write_text(
            &confusion_dir.join(format!("{}.{}.csv", eval.method, region)),
            &eval.cm.to_csv(),
        )?;
        if let Some(diag) = &eval.diagnostic {
            diagnostics.push_str(&format!(
                "{},{},{},{}\n",
                eval.method, region, diag.inconsistent, diag.total
            ));
        }
    }

    let (table, csv) = render_report(&reports);
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("report.txt"), &table)?;
    write_text(&out.join("diagnostics.csv"), &diagnostics)?;
    Ok(ExperimentSummary { reports, table, csv })
}

fn drive(
    plan: &ExperimentPlan,
    splits: &SplitManifests,
    base: &Path,
    out: &Path,
    region_runner: impl Fn(&ExperimentPlan, &RegionData, &Path) -> Result<RegionOutcome>,
) -> Result<ExperimentSummary> {
    plan.validate()?;
    ensure_dir(out)?;
    let mut outcomes = Vec::with_capacity(plan.regions.len());
    let mut test_labels = Vec::new();
    for spec in &plan.regions {
        let data = prepare_region(spec, splits, base, plan.backbone.input_size)?;
        if test_labels.is_empty() {
            test_labels = data.test.iter().map(|s| s.label).collect();
        }
        log::info!(
            "region {}: {} train / {} val / {} test",
            spec.kind.label(),
            data.train.len(),
            data.val.len(),
            data.test.len()
        );
        outcomes.push(region_runner(plan, &data, &out.join(spec.kind.label()))?);
    }
    summarize_outcomes(plan, &outcomes, &test_labels, out)
}

/// Trains and scores every region and method in the plan, writing all
/// artifacts under `out`.
pub fn run_experiment(
    plan: &ExperimentPlan,
    splits: &SplitManifests,
    base: &Path,
    out: &Path,
) -> Result<ExperimentSummary> {
    drive(plan, splits, base, out, run_region)
}

/// Scores every region and method from existing artifacts, rewriting
/// the combined reports; trains nothing.
pub fn evaluate_experiment(
    plan: &ExperimentPlan,
    splits: &SplitManifests,
    base: &Path,
    out: &Path,
) -> Result<ExperimentSummary> {
    drive(plan, splits, base, out, eval_region)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{HeadKind, Stage};
    use crate::dataset::split_manifest;
    use crate::synth::SynthSpec;

    #[test]
    fn method_list_parsing() {
        assert_eq!(
            MethodName::parse_list("trk, rk,mc").unwrap(),
            vec![MethodName::Trk, MethodName::Rk, MethodName::Mc]
        );
        assert_eq!(MethodName::parse_list("MC2").unwrap(), vec![MethodName::Mc2]);
        assert!(MethodName::parse_list("trk,trk").is_err());
        assert!(MethodName::parse_list("svm").is_err());
        assert!(MethodName::parse_list(" , ").is_err());
    }

    #[test]
    fn trk_labels_reflect_settings() {
        assert_eq!(trk_label(RoiVariant::Standard, LossKind::Cea), "trk");
        assert_eq!(trk_label(RoiVariant::Swapped, LossKind::Cea), "trk_swapped");
        assert_eq!(trk_label(RoiVariant::Standard, LossKind::Ce), "trk_ce");
        assert_eq!(trk_label(RoiVariant::Swapped, LossKind::Ce), "trk_swapped_ce");
    }

    #[test]
    fn class_name_defaults() {
        assert_eq!(default_class_names(3), vec!["N", "S", "G"]);
        assert_eq!(default_class_names(4), vec!["C0", "C1", "C2", "C3"]);
    }

    fn tiny_plan() -> ExperimentPlan {
        ExperimentPlan {
            n: 3,
            class_names: default_class_names(3),
            backbone: BackboneConfig {
                input_channels: 3,
                input_size: 16,
                stages: vec![Stage { filters: 4, convs: 1 }],
                head: HeadKind::GapSoftmax,
                classes: 2,
                batch_norm: true,
            },
            primitive_schedule: TrainSchedule { epochs: 1, batch_size: 8, ..Default::default() },
            final_schedule: TrainSchedule {
                epochs: 1,
                batch_size: 8,
                loss: LossKind::Cea,
                ..Default::default()
            },
            policy: AugmentPolicy::identity(),
            methods: MethodName::ALL.to_vec(),
            regions: vec![RegionSpec::disc(), RegionSpec::edisc(), RegionSpec::original()],
            variant: RoiVariant::Standard,
            upsample: Upsample::Bilinear,
            seed: 11,
            workers: 2,
        }
    }

    #[test]
    fn plan_validation_catches_misconfiguration() {
        let good = tiny_plan();
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.class_names.pop();
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.backbone.classes = 3;
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.regions.push(RegionSpec::disc());
        assert!(bad.validate().is_err());

        let mut bad = good;
        bad.methods.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn positive_names_per_method() {
        let plan = tiny_plan();
        assert_eq!(plan.positive_names(MethodName::Trk), vec!["S", "G"]);
        assert_eq!(plan.positive_names(MethodName::Mc), vec!["S", "G"]);
        assert_eq!(plan.positive_names(MethodName::Mc1), vec!["S+G"]);
        assert_eq!(plan.positive_names(MethodName::Mc2), vec!["G"]);
    }

    fn tiny_dataset(dir: &Path, seed: u64) -> SplitManifests {
        let mut spec = SynthSpec::with_classes(3, 8, seed);
        spec.h = 16;
        let manifest = crate::synth::generate(&spec, dir).unwrap();
        split_manifest(&manifest, 0.25, 0.2, seed).unwrap()
    }

    #[test]
    fn full_run_produces_stable_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let splits = tiny_dataset(&data_dir, 5);
        let plan = tiny_plan();

        let out1 = tmp.path().join("run1");
        let summary = run_experiment(&plan, &splits, &data_dir, &out1).unwrap();
        // 5 methods x 3 regions + 5 ensemble rows
        assert_eq!(summary.reports.len(), 20);
        assert!(summary.reports.iter().any(|r| r.region == "ensemble" && r.method == "trk"));
        assert!(out1.join("metrics.csv").is_file());
        assert!(out1.join("disc/primitive.bank/manifest.json").is_file());
        assert!(out1.join("disc/final.bank/manifest.json").is_file());
        assert!(out1.join("disc/mc.ck").is_file());
        assert!(out1.join("original/primitive.sub2.csv").is_file());

        // the one-stage row is exactly the bank the two-stage method started from
        let bank = SubModelBank::load(out1.join("edisc/primitive.bank")).unwrap();
        let region = prepare_region(&RegionSpec::edisc(), &splits, &data_dir, 16).unwrap();
        let (cm, _, _) = evaluate_rank_bank(&bank, &region.test).unwrap();
        let saved =
            summary.reports.iter().find(|r| r.method == "rk" && r.region == "edisc").unwrap();
        assert_eq!(metrics(&cm, &["S", "G"], "rk", "edisc").unwrap(), *saved);

        let out2 = tmp.path().join("run2");
        let repeat = run_experiment(&plan, &splits, &data_dir, &out2).unwrap();
        assert_eq!(summary.csv, repeat.csv);
        assert_eq!(
            std::fs::read(out1.join("metrics.csv")).unwrap(),
            std::fs::read(out2.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(out1.join("disc/final.bank/sub1.ck")).unwrap(),
            std::fs::read(out2.join("disc/final.bank/sub1.ck")).unwrap()
        );

        // rescoring the same artifacts reproduces the same reports
        let again = evaluate_experiment(&plan, &splits, &data_dir, &out1).unwrap();
        assert_eq!(again.csv, summary.csv);
    }

    #[test]
    fn stages_name_their_missing_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let splits = tiny_dataset(&data_dir, 7);
        let mut plan = tiny_plan();
        plan.regions = vec![RegionSpec::original()];
        let data = prepare_region(&RegionSpec::original(), &splits, &data_dir, 16).unwrap();
        let dir = tmp.path().join("run/original");

        let err = extract_roi_stage(&plan, &data, &dir).unwrap_err().to_string();
        assert!(err.contains("train-primitive"), "{err}");
        let err = eval_region(&plan, &data, &dir).unwrap_err().to_string();
        assert!(err.contains("train-primitive"), "{err}");

        train_primitive_stage(&plan, &data, &dir).unwrap();
        let err = train_final_stage(&plan, &data, &dir).unwrap_err().to_string();
        assert!(err.contains("extract-roi"), "{err}");

        plan.methods = vec![MethodName::Mc2];
        let err = eval_region(&plan, &data, &dir).unwrap_err().to_string();
        assert!(err.contains("train-baseline mc2"), "{err}");
    }

    #[test]
    fn staged_run_matches_composed_run() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let splits = tiny_dataset(&data_dir, 9);
        let mut plan = tiny_plan();
        plan.regions = vec![RegionSpec::disc()];
        plan.methods = vec![MethodName::Trk, MethodName::Rk, MethodName::Mc1];
        let data = prepare_region(&RegionSpec::disc(), &splits, &data_dir, 16).unwrap();

        let composed = tmp.path().join("composed/disc");
        run_region(&plan, &data, &composed).unwrap();

        let staged = tmp.path().join("staged/disc");
        train_primitive_stage(&plan, &data, &staged).unwrap();
        extract_roi_stage(&plan, &data, &staged).unwrap();
        train_final_stage(&plan, &data, &staged).unwrap();
        train_baseline_stage(&plan, MethodName::Mc1, &data, &staged).unwrap();
        eval_region(&plan, &data, &staged).unwrap();

        for file in ["primitive.bank/sub1.ck", "final.bank/sub2.ck", "mc1.ck", "final.sub1.csv"] {
            assert_eq!(
                std::fs::read(composed.join(file)).unwrap(),
                std::fs::read(staged.join(file)).unwrap(),
                "{file} differs between staged and composed runs"
            );
        }
    }

    #[test]
    fn regions_train_with_distinct_streams() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let splits = tiny_dataset(&data_dir, 6);
        let mut plan = tiny_plan();
        plan.methods = vec![MethodName::Rk];
        plan.regions = vec![RegionSpec::disc(), RegionSpec::original()];

        let out = tmp.path().join("run");
        run_experiment(&plan, &splits, &data_dir, &out).unwrap();
        let a = std::fs::read(out.join("disc/primitive.bank/sub1.ck")).unwrap();
        let b = std::fs::read(out.join("original/primitive.bank/sub1.ck")).unwrap();
        assert_ne!(a, b);
    }
}
