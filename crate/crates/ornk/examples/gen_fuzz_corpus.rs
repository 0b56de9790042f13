//! Regenerates the fuzz corpus seeds from known-good artifacts:
//!
//!     cargo run -p ornk --example gen_fuzz_corpus
//!
//! Each seed is a valid instance of the format its target parses, so the
//! fuzzer starts from deep inside the accepted grammar.

use std::fs;
use std::path::Path;

use ornk::backbone::{Backbone, BackboneConfig, HeadKind, Stage};
use ornk::cam::RoiVariant;
use ornk::config::RunConfig;
use ornk::manifest::{Manifest, ManifestRow};
use ornk::preprocess::DiscBox;
use ornk::ranking::BankManifest;
use ornk::rng::seed_stream;
use ornk::roi_cache::{serialize_roi, RoiEntry};
use ornk::tensor::{serialize_checkpoint, Tensor};
use ornk::Result;

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ornk::Error::io(dir.display().to_string(), e))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| ornk::Error::io(path.display().to_string(), e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let corpus = root.join("fuzz/corpus");

    let dir = corpus.join("checkpoint");
    let params = vec![
        ("w".to_string(), Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 0.0])?),
        ("b".to_string(), Tensor::new(vec![2], vec![0.0625, -7.5])?),
    ];
    write(&dir, "tiny.ck", &serialize_checkpoint(&params, "demo")?)?;
    write(&dir, "empty.ck", &serialize_checkpoint(&[], "")?)?;
    let config = BackboneConfig {
        input_channels: 1,
        input_size: 8,
        stages: vec![Stage { filters: 2, convs: 1 }],
        head: HeadKind::GapSoftmax,
        classes: 2,
        batch_norm: true,
    };
    let model = Backbone::build(config.clone(), &mut seed_stream(3, "corpus"))?;
    write(&dir, "model.ck", &serialize_checkpoint(&model.named_tensors(), "backbone")?)?;

    let dir = corpus.join("roi_entry");
    let entry = RoiEntry {
        id: "c0_0000".to_string(),
        predicted: 1,
        variant: RoiVariant::Standard,
        bank_hash: [7; 32],
        values: Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 / 8.0 - 1.0).collect())?,
    };
    write(&dir, "standard.roi", &serialize_roi(&entry)?)?;
    let entry = RoiEntry {
        id: "c2_0003".to_string(),
        predicted: 0,
        variant: RoiVariant::Swapped,
        bank_hash: [0; 32],
        values: Tensor::new(vec![2, 2], vec![-1.5, 0.0, 1.5, 2.0])?,
    };
    write(&dir, "swapped.roi", &serialize_roi(&entry)?)?;

    let dir = corpus.join("manifest_csv");
    let manifest = Manifest {
        rows: vec![
            ManifestRow {
                id: "c0_0000".to_string(),
                path: "c0_0000.png".to_string(),
                label: Some(0),
                disc_box: Some(DiscBox { x0: 10, y0: 12, x1: 40, y1: 44 }),
            },
            ManifestRow {
                id: "c2_0003".to_string(),
                path: "deep/c2_0003.png".to_string(),
                label: Some(2),
                disc_box: None,
            },
        ],
    };
    write(&dir, "labeled.csv", manifest.to_csv().as_bytes())?;
    let unlabeled = Manifest {
        rows: vec![ManifestRow {
            id: "probe".to_string(),
            path: "probe.png".to_string(),
            label: None,
            disc_box: None,
        }],
    };
    write(&dir, "unlabeled.csv", unlabeled.to_csv().as_bytes())?;
    write(&dir, "header.csv", Manifest::default().to_csv().as_bytes())?;

    let dir = corpus.join("run_config");
    let text = toml::to_string_pretty(&RunConfig::default())
        .map_err(|e| ornk::Error::Config(e.to_string()))?;
    write(&dir, "default.toml", text.as_bytes())?;
    let desk = fs::read(root.join("configs/desk.toml"))
        .map_err(|e| ornk::Error::io("configs/desk.toml", e))?;
    write(&dir, "desk.toml", &desk)?;
    write(&dir, "minimal.toml", b"seed = 3\n")?;

    let dir = corpus.join("bank_manifest");
    let bank = BankManifest {
        format: "ornk.bank.v1".to_string(),
        n: 3,
        config_hash: config.hash(),
        val_loss: vec![Some(0.125), None],
        files: vec!["sub1.ck".to_string(), "sub2.ck".to_string()],
    };
    let json = serde_json::to_vec_pretty(&bank).map_err(ornk::Error::Json)?;
    write(&dir, "bank.json", &json)?;

    Ok(())
}
