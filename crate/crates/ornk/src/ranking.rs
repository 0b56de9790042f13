//! Ranking banks: an N-class ordinal task decomposed into N-1 binary
//! "label >= k" sub-models. The aggregated prediction counts how many
//! sub-models fire, which lands back in 0..N-1.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{argmax_lowest, hex, Backbone, BackboneConfig};
use crate::dataset::LabeledSample;
use crate::rng::seed_stream;
use crate::tensor::{Mode, Tensor};
use crate::{Error, Result};

const BANK_FORMAT: &str = "ornk.bank.v1";

/// Rewrites labels for sub-model k: 1 where the label is at least k.
pub fn relabel(samples: &[LabeledSample], k: usize, n: usize) -> Result<Vec<LabeledSample>> {
    if n < 2 || !(1..n).contains(&k) {
        return Err(Error::Config(format!("sub-model index {k} outside 1..={}", n - 1)));
    }
    samples
        .iter()
        .map(|s| {
            if s.label >= n {
                return Err(Error::Config(format!(
                    "sample {} has label {} but the task has {n} classes",
                    s.id, s.label
                )));
            }
            Ok(LabeledSample {
                id: s.id.clone(),
                image: s.image.clone(),
                label: usize::from(s.label >= k),
                disc_box: s.disc_box,
            })
        })
        .collect()
}

/// How a multi-class baseline sees the ordinal labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMapping {
    /// Keep all N classes.
    Identity,
    /// Binary: everything above class 0 is positive.
    MergeHigh,
    /// Binary: only the top class is positive.
    MergeLow,
}

impl ClassMapping {
    pub fn classes(&self, n: usize) -> usize {
        match self {
            ClassMapping::Identity => n,
            _ => 2,
        }
    }

    pub fn apply(&self, label: usize, n: usize) -> Result<usize> {
        if label >= n {
            return Err(Error::Config(format!("label {label} out of range for {n} classes")));
        }
        Ok(match self {
            ClassMapping::Identity => label,
            ClassMapping::MergeHigh => usize::from(label >= 1),
            ClassMapping::MergeLow => usize::from(label == n - 1),
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            ClassMapping::Identity => "identity",
            ClassMapping::MergeHigh => "merge_high",
            ClassMapping::MergeLow => "merge_low",
        }
    }
}

/// True when a higher sub-model fired without all lower ones firing.
/// Counting still yields a valid rank; this only flags the disagreement.
pub fn rank_inconsistent(bits: &[u8]) -> bool {
    bits.windows(2).any(|w| w[0] == 0 && w[1] == 1)
}

/// The N-1 binary sub-models of one ranking stage, indexed 1..=N-1.
#[derive(Debug, Clone)]
pub struct SubModelBank {
    n: usize,
    models: Vec<Backbone>,
    val_loss: Vec<Option<f64>>,
}

impl SubModelBank {
    /// Builds N-1 fresh sub-models, each from its own derived stream so
    /// the initializations are independent of bank size and order.
    pub fn build(config: &BackboneConfig, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("a ranking bank needs n >= 2, got {n}")));
        }
        if config.classes != 2 {
            return Err(Error::Config(format!(
                "ranking sub-models are binary; config declares {} classes",
                config.classes
            )));
        }
        let models = (1..n)
            .map(|k| {
                let mut rng = seed_stream(seed, &format!("init.sub{k}"));
                Backbone::build(config.clone(), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubModelBank { n, models, val_loss: vec![None; n - 1] })
    }

    pub fn from_models(models: Vec<Backbone>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("a ranking bank needs at least one sub-model".into()));
        }
        let n = models.len() + 1;
        let hash0 = models[0].config().hash();
        for m in &models {
            if m.config().classes != 2 {
                return Err(Error::Config("ranking sub-models must be binary".into()));
            }
            if m.config().hash() != hash0 {
                return Err(Error::Config("sub-models disagree on architecture".into()));
            }
        }
        Ok(SubModelBank { n, models, val_loss: vec![None; n - 1] })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &BackboneConfig {
        self.models[0].config()
    }

    pub fn model(&self, k: usize) -> &Backbone {
        assert!((1..self.n).contains(&k), "sub-model index {k} outside 1..={}", self.n - 1);
        &self.models[k - 1]
    }

    pub fn model_mut(&mut self, k: usize) -> &mut Backbone {
        assert!((1..self.n).contains(&k), "sub-model index {k} outside 1..={}", self.n - 1);
        &mut self.models[k - 1]
    }

    pub fn set_model(&mut self, k: usize, model: Backbone, val_loss: f64) -> Result<()> {
        if !(1..self.n).contains(&k) {
            return Err(Error::Config(format!("sub-model index {k} outside 1..={}", self.n - 1)));
        }
        if model.config().hash() != self.config().hash() {
            return Err(Error::Config("replacement sub-model has a different architecture".into()));
        }
        self.models[k - 1] = model;
        self.val_loss[k - 1] = Some(val_loss);
        Ok(())
    }

    pub fn val_loss(&self) -> &[Option<f64>] {
        &self.val_loss
    }

    /// Predicted rank for one image: the number of sub-models voting 1,
    /// along with each vote in ascending sub-model order.
    pub fn aggregate(&self, x: &Tensor) -> Result<(usize, Vec<u8>)> {
        let mut bits = Vec::with_capacity(self.n - 1);
        for model in &self.models {
            let trace = model.forward(x, Mode::Eval)?;
            bits.push(u8::from(argmax_lowest(trace.probabilities.data()) == 1));
        }
        let p = bits.iter().filter(|&&b| b == 1).count();
        Ok((p, bits))
    }

    /// Batched [`aggregate`](Self::aggregate) over many images.
    pub fn aggregate_batch(&self, images: &[Tensor]) -> Result<Vec<(usize, Vec<u8>)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let shape = images[0].shape().to_vec();
        let mut bits = vec![Vec::with_capacity(self.n - 1); images.len()];
        for chunk_start in (0..images.len()).step_by(64) {
            let chunk = &images[chunk_start..(chunk_start + 64).min(images.len())];
            let mut stacked = Vec::with_capacity(chunk.len() * images[0].numel());
            for img in chunk {
                if img.shape() != shape {
                    return Err(Error::Shape(format!(
                        "image shapes differ within a batch: {:?} vs {:?}",
                        img.shape(),
                        shape
                    )));
                }
                stacked.extend_from_slice(img.data());
            }
            let mut full = vec![chunk.len()];
            full.extend_from_slice(&shape);
            let xb = Tensor::new(full, stacked)?;
            for model in &self.models {
                let (_, probs) = model.forward_batch(&xb)?;
                for (i, row) in probs.data().chunks(2).enumerate() {
                    bits[chunk_start + i].push(u8::from(argmax_lowest(row) == 1));
                }
            }
        }
        Ok(bits
            .into_iter()
            .map(|b| (b.iter().filter(|&&x| x == 1).count(), b))
            .collect())
    }

    /// A digest over the sub-model weights, used to tie ROI caches to the
    /// exact bank that produced them.
    pub fn content_hash(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(b"ORNKBANK");
        h.update((self.n as u64).to_le_bytes());
        for model in &self.models {
            let digest = Sha256::digest(model.to_bytes()?);
            h.update(digest);
        }
        Ok(h.finalize().into())
    }

    /// Saves the bank as a directory: one checkpoint per sub-model plus a
    /// manifest tying them together.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut files = Vec::with_capacity(self.n - 1);
        for (i, model) in self.models.iter().enumerate() {
            let name = format!("sub{}.ck", i + 1);
            model.save(dir.join(&name))?;
            files.push(name);
        }
        let manifest = BankManifest {
            format: BANK_FORMAT.to_string(),
            n: self.n,
            config_hash: self.config().hash(),
            val_loss: self.val_loss.clone(),
            files,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes =
            std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest = parse_bank_manifest(&bytes)?;
        let mut models = Vec::with_capacity(manifest.files.len());
        for name in &manifest.files {
            let model = Backbone::load(dir.join(name))?;
            if model.config().hash() != manifest.config_hash {
                return Err(Error::parse(
                    "bank",
                    format!("{name} does not match the architecture in the manifest"),
                ));
            }
            models.push(model);
        }
        let mut bank = SubModelBank::from_models(models)?;
        bank.val_loss = manifest.val_loss;
        Ok(bank)
    }
}

/// The manifest stored alongside a bank's checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankManifest {
    pub format: String,
    pub n: usize,
    pub config_hash: String,
    pub val_loss: Vec<Option<f64>>,
    pub files: Vec<String>,
}

/// Parses and validates a bank manifest without touching the filesystem.
pub fn parse_bank_manifest(bytes: &[u8]) -> Result<BankManifest> {
    let manifest: BankManifest = serde_json::from_slice(bytes)
        .map_err(|e| Error::parse("bank manifest", e.to_string()))?;
    if manifest.format != BANK_FORMAT {
        return Err(Error::parse(
            "bank manifest",
            format!("unknown format tag {:?}", manifest.format),
        ));
    }
    if manifest.n < 2 {
        return Err(Error::parse("bank manifest", format!("n must be >= 2, got {}", manifest.n)));
    }
    if manifest.files.len() != manifest.n - 1 {
        return Err(Error::parse(
            "bank manifest",
            format!("{} files listed for n = {}", manifest.files.len(), manifest.n),
        ));
    }
    if manifest.val_loss.len() != manifest.n - 1 {
        return Err(Error::parse(
            "bank manifest",
            format!("{} val losses listed for n = {}", manifest.val_loss.len(), manifest.n),
        ));
    }
    if manifest.config_hash.len() != 64
        || !manifest.config_hash.bytes().all(|b| b.is_ascii_hexdigit())
    {
        return Err(Error::parse("bank manifest", "config hash is not 64 hex digits"));
    }
    let mut seen = HashSet::new();
    for name in &manifest.files {
        if name.is_empty() || name.contains('/') || name.contains('\\') || name.contains("..") {
            return Err(Error::parse("bank manifest", format!("bad file name {name:?}")));
        }
        if !seen.insert(name) {
            return Err(Error::parse("bank manifest", format!("duplicate file {name:?}")));
        }
    }
    for (i, loss) in manifest.val_loss.iter().enumerate() {
        if let Some(v) = loss {
            if !v.is_finite() {
                return Err(Error::parse(
                    "bank manifest",
                    format!("val loss {i} is not finite"),
                ));
            }
        }
    }
    Ok(manifest)
}

pub fn bank_hash_hex(bank: &SubModelBank) -> Result<String> {
    Ok(hex(&bank.content_hash()?))
}
