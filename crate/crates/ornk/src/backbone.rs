//! Configurable convolutional network. Stages of 3x3 conv blocks with a
//! stride-2 max pool after each stage, then either a bare GAP-to-softmax
//! head (required wherever activation maps are read back) or a GAP head
//! with a small fully-connected stack.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{
    parse_checkpoint, serialize_checkpoint, BatchStats, Mode, NodeId, Padding, PoolMode, Tape,
    Tensor,
};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Stage {
    pub filters: usize,
    pub convs: usize,
}

impl From<(usize, usize)> for Stage {
    fn from((filters, convs): (usize, usize)) -> Self {
        Stage { filters, convs }
    }
}

impl From<Stage> for (usize, usize) {
    fn from(s: Stage) -> Self {
        (s.filters, s.convs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// GAP feeding the class softmax directly; no fully-connected layers,
    /// which is what makes activation maps readable from the head weights.
    GapSoftmax,
    /// GAP, then a fully-connected stack with dropout on every listed
    /// layer, then the class softmax.
    GapFcSoftmax { widths: Vec<usize>, dropout: f64 },
}

impl HeadKind {
    pub fn is_gap_softmax(&self) -> bool {
        matches!(self, HeadKind::GapSoftmax)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stages: Vec<Stage>,
    pub head: HeadKind,
    pub classes: usize,
    pub batch_norm: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage required".into()));
        }
        if self.stages.iter().any(|s| s.filters == 0 || s.convs == 0) {
            return Err(Error::Config("stage filters and conv counts must be positive".into()));
        }
        let pools = self.stages.len() as u32;
        let div = 1usize << pools;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{pools} pooling stages",
                self.input_size
            )));
        }
        if let HeadKind::GapFcSoftmax { widths, dropout } = &self.head {
            if widths.is_empty() {
                return Err(Error::Config("fc head needs at least one width".into()));
            }
            if widths.iter().any(|&w| w == 0) {
                return Err(Error::Config("fc widths must be positive".into()));
            }
            if !(0.0..1.0).contains(dropout) {
                return Err(Error::Config(format!("dropout must be in [0,1), got {dropout}")));
            }
        }
        Ok(())
    }

    /// Spatial side of the last activation map: input_size / 2^stages.
    pub fn last_map_size(&self) -> usize {
        self.input_size >> self.stages.len()
    }

    /// Channel count of the last activation map.
    pub fn last_filters(&self) -> usize {
        self.stages.last().map(|s| s.filters).unwrap_or(0)
    }

    /// Stable content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// A built network: config plus named parameters in construction order.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<Param>,
}

/// Everything a single forward pass exposes, including the internals the
/// activation-map computation reads.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub last_activations: Tensor,
    pub gap_features: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

/// Node handles of a forward pass built on a caller-owned tape, for
/// training steps that need the gradients afterwards.
pub struct BuiltForward {
    pub logits: NodeId,
    pub probabilities: NodeId,
    pub last_activations: NodeId,
    pub gap_features: NodeId,
    /// (parameter index, tape node) for every trainable parameter.
    pub param_nodes: Vec<(usize, NodeId)>,
    /// (running-mean param index, running-var param index, batch stats)
    /// for every batch-norm layer touched in train mode.
    pub bn_stats: Vec<(usize, usize, BatchStats)>,
}

fn expected_params(config: &BackboneConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut chans = config.input_channels;
    for (si, stage) in config.stages.iter().enumerate() {
        for ci in 0..stage.convs {
            let prefix = format!("stage{si}.conv{ci}");
            out.push((format!("{prefix}.kernel"), vec![stage.filters, chans, 3, 3], true));
            out.push((format!("{prefix}.bias"), vec![stage.filters], true));
            if config.batch_norm {
                out.push((format!("{prefix}.bn.gamma"), vec![stage.filters], true));
                out.push((format!("{prefix}.bn.beta"), vec![stage.filters], true));
                out.push((format!("{prefix}.bn.mean"), vec![stage.filters], false));
                out.push((format!("{prefix}.bn.var"), vec![stage.filters], false));
            }
            chans = stage.filters;
        }
    }
    let mut width = config.last_filters();
    if let HeadKind::GapFcSoftmax { widths, .. } = &config.head {
        for (i, &w) in widths.iter().enumerate() {
            let prefix = format!("head.fc{i}");
            out.push((format!("{prefix}.weight"), vec![w, width], true));
            out.push((format!("{prefix}.bias"), vec![w], true));
            if config.batch_norm {
                out.push((format!("{prefix}.bn.gamma"), vec![w], true));
                out.push((format!("{prefix}.bn.beta"), vec![w], true));
                out.push((format!("{prefix}.bn.mean"), vec![w], false));
                out.push((format!("{prefix}.bn.var"), vec![w], false));
            }
            width = w;
        }
    }
    out.push(("head.out.weight".to_string(), vec![config.classes, width], true));
    out.push(("head.out.bias".to_string(), vec![config.classes], true));
    out
}

impl Backbone {
    /// He-style initialization: weights drawn from N(0, sqrt(2/fan_in))
    /// in declaration order, biases zero, batch-norm scale 1 / shift 0,
    /// running statistics mean 0 / variance 1.
    pub fn build(config: BackboneConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape, trainable) in expected_params(&config) {
            let tensor = if name.ends_with(".kernel") || name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
                Tensor::new(shape, data)?
            } else if name.ends_with(".bn.gamma") || name.ends_with(".bn.var") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            params.push(Param { name, tensor, trainable });
        }
        Ok(Backbone { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Replaces one named parameter. The new tensor must keep the shape.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let param = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Missing(format!("no parameter named {name:?}")))?;
        if param.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                param.tensor.shape(),
                tensor.shape()
            )));
        }
        param.tensor = tensor;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).collect()
    }

    /// Softmax-layer weights [classes, features] and bias. Only heads
    /// without fully-connected layers expose them; anything else cannot
    /// produce activation maps.
    pub fn head_weights(&self) -> Result<(&Tensor, &Tensor)> {
        if !self.config.head.is_gap_softmax() {
            return Err(Error::Config(
                "activation maps need the gap_softmax head; this model has fully-connected layers"
                    .into(),
            ));
        }
        let w = self.param("head.out.weight").expect("built model has head weights");
        let b = self.param("head.out.bias").expect("built model has head bias");
        Ok((w, b))
    }

    fn check_input(&self, x: &Tensor, batched: bool) -> Result<()> {
        let h = self.config.input_size;
        let c = self.config.input_channels;
        let ok = if batched {
            matches!(x.shape(), &[_, xc, xh, xw] if xc == c && xh == h && xw == h)
        } else {
            x.shape() == [c, h, h]
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "input shape {:?} does not match configured [{c},{h},{h}]",
                x.shape()
            )))
        }
    }

    /// Builds the forward graph on `tape` starting from node `x`. The
    /// dropout stream is only consulted in train mode by fc heads.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<BuiltForward> {
        fn take(
            tape: &mut Tape,
            params: &[Param],
            idx: &mut usize,
            nodes: &mut Vec<(usize, NodeId)>,
        ) -> NodeId {
            let i = *idx;
            *idx += 1;
            let id = tape.leaf(params[i].tensor.clone());
            nodes.push((i, id));
            id
        }

        let mut param_nodes = Vec::new();
        let mut bn_stats = Vec::new();
        let mut idx = 0usize;
        let mut cur = x;
        for stage in &self.config.stages {
            for _ in 0..stage.convs {
                let k = take(tape, &self.params, &mut idx, &mut param_nodes);
                let b = take(tape, &self.params, &mut idx, &mut param_nodes);
                cur = tape.conv2d(cur, k, b, Padding::Same)?;
                if self.config.batch_norm {
                    let g = take(tape, &self.params, &mut idx, &mut param_nodes);
                    let be = take(tape, &self.params, &mut idx, &mut param_nodes);
                    let mean_idx = idx;
                    idx += 2;
                    let (out, stats) = tape.batch_norm(
                        cur,
                        g,
                        be,
                        self.params[mean_idx].tensor.data(),
                        self.params[mean_idx + 1].tensor.data(),
                        mode,
                        BN_EPS,
                    )?;
                    cur = out;
                    if let Some(s) = stats {
                        bn_stats.push((mean_idx, mean_idx + 1, s));
                    }
                }
                cur = tape.relu(cur);
            }
            cur = tape.stride2_pool(cur, PoolMode::Max)?;
        }
        let last_activations = cur;
        let gap = tape.global_average_pool(cur)?;
        let mut feat = gap;
        if let HeadKind::GapFcSoftmax { widths, dropout } = &self.config.head {
            for _ in widths {
                let w = take(tape, &self.params, &mut idx, &mut param_nodes);
                let b = take(tape, &self.params, &mut idx, &mut param_nodes);
                feat = tape.dense(feat, w, b)?;
                if self.config.batch_norm {
                    let g = take(tape, &self.params, &mut idx, &mut param_nodes);
                    let be = take(tape, &self.params, &mut idx, &mut param_nodes);
                    let mean_idx = idx;
                    idx += 2;
                    let (out, stats) = tape.batch_norm(
                        feat,
                        g,
                        be,
                        self.params[mean_idx].tensor.data(),
                        self.params[mean_idx + 1].tensor.data(),
                        mode,
                        BN_EPS,
                    )?;
                    feat = out;
                    if let Some(s) = stats {
                        bn_stats.push((mean_idx, mean_idx + 1, s));
                    }
                }
                feat = tape.relu(feat);
                if *dropout > 0.0 && mode == Mode::Train {
                    let rng = dropout_rng.as_deref_mut().ok_or_else(|| {
                        Error::Config("train-mode forward with dropout needs an rng".into())
                    })?;
                    feat = tape.dropout(feat, *dropout, mode, rng)?;
                }
            }
        }
        let w = take(tape, &self.params, &mut idx, &mut param_nodes);
        let b = take(tape, &self.params, &mut idx, &mut param_nodes);
        let logits = tape.dense(feat, w, b)?;
        let probabilities = tape.softmax(logits)?;
        Ok(BuiltForward {
            logits,
            probabilities,
            last_activations,
            gap_features: gap,
            param_nodes,
            bn_stats,
        })
    }

    /// Single-sample forward pass returning the full trace.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        self.check_input(x, false)?;
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let built = self.build_forward(&mut tape, xn, mode, Some(&mut rng))?;
        Ok(ForwardTrace {
            last_activations: tape.value(built.last_activations).clone(),
            gap_features: tape.value(built.gap_features).clone(),
            logits: tape.value(built.logits).clone(),
            probabilities: tape.value(built.probabilities).clone(),
        })
    }

    /// Eval-mode batch forward: returns logits and probabilities [B,c].
    pub fn forward_batch(&self, xb: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(xb, true)?;
        let mut tape = Tape::new();
        let xn = tape.leaf(xb.clone());
        let built = self.build_forward(&mut tape, xn, Mode::Eval, None)?;
        Ok((tape.value(built.logits).clone(), tape.value(built.probabilities).clone()))
    }

    /// Argmax of the class probabilities; ties break toward the lower
    /// class index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let trace = self.forward(x, Mode::Eval)?;
        Ok(argmax_lowest(trace.probabilities.data()))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, stats: &[(usize, usize, BatchStats)]) {
        for (mean_idx, var_idx, s) in stats {
            let mean = self.params[*mean_idx].tensor.data_mut();
            for (m, b) in mean.iter_mut().zip(&s.mean) {
                *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
            }
            let var = self.params[*var_idx].tensor.data_mut();
            for (v, b) in var.iter_mut().zip(&s.var) {
                *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&CheckpointMeta {
            format: META_FORMAT.to_string(),
            config: self.config.clone(),
        })?;
        serialize_checkpoint(&self.named_tensors(), &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = parse_checkpoint(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)
            .map_err(|e| Error::parse("checkpoint", format!("metadata: {e}")))?;
        if meta.format != META_FORMAT {
            return Err(Error::parse(
                "checkpoint",
                format!("unexpected metadata format {:?}", meta.format),
            ));
        }
        meta.config.validate()?;
        let expected = expected_params(&meta.config);
        if tensors.len() != expected.len() {
            return Err(Error::parse(
                "checkpoint",
                format!("expected {} parameters, found {}", expected.len(), tensors.len()),
            ));
        }
        let mut params = Vec::with_capacity(expected.len());
        for ((name, shape, trainable), (got_name, tensor)) in expected.into_iter().zip(tensors) {
            if name != got_name {
                return Err(Error::parse(
                    "checkpoint",
                    format!("parameter order mismatch: expected {name:?}, found {got_name:?}"),
                ));
            }
            if tensor.shape() != shape {
                return Err(Error::parse(
                    "checkpoint",
                    format!("parameter {name:?} has shape {:?}, expected {shape:?}", tensor.shape()),
                ));
            }
            params.push(Param { name, tensor, trainable });
        }
        Ok(Backbone { config: meta.config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), bytes)
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

const META_FORMAT: &str = "ornk.backbone.v1";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: BackboneConfig,
}

pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Copies every matching parameter from `source` into `target`. The two
/// may differ in first-layer input channels (the extra target slices are
/// zeroed, so appended channels start invisible) and in head kind (a
/// different head keeps its fresh initialization).
pub fn transfer_weights(source: &Backbone, target: &mut Backbone) -> Result<()> {
    let s = &source.config;
    let t = target.config.clone();
    if s.stages != t.stages
        || s.batch_norm != t.batch_norm
        || s.input_size != t.input_size
        || s.classes != t.classes
    {
        return Err(Error::Config(
            "transfer needs identical stages, input size, classes and batch-norm setting".into(),
        ));
    }
    if t.input_channels < s.input_channels {
        return Err(Error::Config(format!(
            "target has fewer input channels ({}) than source ({})",
            t.input_channels, s.input_channels
        )));
    }
    let heads_match = s.head == t.head;
    let first_kernel = "stage0.conv0.kernel";
    for i in 0..target.params.len() {
        let name = target.params[i].name.clone();
        if name.starts_with("head.") && !heads_match {
            continue;
        }
        let Some(src) = source.param(&name) else {
            // Head parameters that only exist on one side.
            continue;
        };
        if name == first_kernel {
            let f = t.stages[0].filters;
            let cs = s.input_channels;
            let ct = t.input_channels;
            let sdata = src.data();
            let tdata = target.params[i].tensor.data_mut();
            for fi in 0..f {
                for c in 0..ct {
                    let dst = (fi * ct + c) * 9;
                    if c < cs {
                        let sbase = (fi * cs + c) * 9;
                        tdata[dst..dst + 9].copy_from_slice(&sdata[sbase..sbase + 9]);
                    } else {
                        tdata[dst..dst + 9].fill(0.0);
                    }
                }
            }
        } else {
            if src.shape() != target.params[i].tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {name:?} shapes differ: {:?} vs {:?}",
                    src.shape(),
                    target.params[i].tensor.shape()
                )));
            }
            target.params[i].tensor = src.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config(channels: usize, head: HeadKind) -> BackboneConfig {
        BackboneConfig {
            input_channels: channels,
            input_size: 16,
            stages: vec![
                Stage { filters: 2, convs: 1 },
                Stage { filters: 2, convs: 1 },
                Stage { filters: 3, convs: 1 },
                Stage { filters: 3, convs: 1 },
            ],
            head,
            classes: 2,
            batch_norm: true,
        }
    }

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_input(config: &BackboneConfig, r: &mut ChaCha12Rng) -> Tensor {
        let n = config.input_channels * config.input_size * config.input_size;
        Tensor::new(
            vec![config.input_channels, config.input_size, config.input_size],
            (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pool_count_determines_map_size() {
        let config = BackboneConfig {
            input_channels: 3,
            input_size: 64,
            stages: vec![
                Stage { filters: 2, convs: 1 },
                Stage { filters: 2, convs: 1 },
                Stage { filters: 2, convs: 1 },
            ],
            head: HeadKind::GapSoftmax,
            classes: 2,
            batch_norm: false,
        };
        let model = Backbone::build(config, &mut rng(1)).unwrap();
        let x = random_input(model.config(), &mut rng(2));
        let trace = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(trace.last_activations.shape(), &[2, 8, 8]);
    }

    #[test]
    fn full_scale_geometry() {
        // 512 input through 4 pooling stages with 1024 final filters
        // leaves a 32 x 32 x 1024 map.
        let config = BackboneConfig {
            input_channels: 3,
            input_size: 512,
            stages: vec![
                Stage { filters: 64, convs: 2 },
                Stage { filters: 128, convs: 2 },
                Stage { filters: 512, convs: 2 },
                Stage { filters: 1024, convs: 2 },
            ],
            head: HeadKind::GapSoftmax,
            classes: 2,
            batch_norm: true,
        };
        config.validate().unwrap();
        assert_eq!(config.last_map_size(), 32);
        assert_eq!(config.last_filters(), 1024);
    }

    #[test]
    fn invalid_pooling_rejected() {
        let mut config = tiny_config(3, HeadKind::GapSoftmax);
        config.input_size = 20; // not divisible by 2^4
        assert!(Backbone::build(config, &mut rng(1)).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let config = tiny_config(3, HeadKind::GapSoftmax);
        let a = Backbone::build(config.clone(), &mut rng(42)).unwrap();
        let b = Backbone::build(config, &mut rng(42)).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_trace_identity_holds() {
        let model = Backbone::build(tiny_config(3, HeadKind::GapSoftmax), &mut rng(3)).unwrap();
        let mut r = rng(4);
        for _ in 0..5 {
            let x = random_input(model.config(), &mut r);
            let trace = model.forward(&x, Mode::Eval).unwrap();
            let sum: f64 = trace.probabilities.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // logits == w . F + bias for the gap head
            let (w, b) = model.head_weights().unwrap();
            for c in 0..2 {
                let mut expect = b.data()[c];
                for (wi, fi) in w.data()[c * w.shape()[1]..(c + 1) * w.shape()[1]]
                    .iter()
                    .zip(trace.gap_features.data())
                {
                    expect += wi * fi;
                }
                assert!((expect - trace.logits.data()[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let model = Backbone::build(tiny_config(3, HeadKind::GapSoftmax), &mut rng(5)).unwrap();
        let x = random_input(model.config(), &mut rng(6));
        let t1 = model.forward(&x, Mode::Eval).unwrap();
        let t2 = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(t1.logits.data(), t2.logits.data());
        // Same image twice in one batch gives identical rows.
        let mut both = x.data().to_vec();
        both.extend_from_slice(x.data());
        let xb = Tensor::new(vec![2, 3, 16, 16], both).unwrap();
        let (logits, _) = model.forward_batch(&xb).unwrap();
        assert_eq!(logits.data()[..2], logits.data()[2..]);
    }

    #[test]
    fn predict_tie_breaks_low() {
        assert_eq!(argmax_lowest(&[0.9, 0.1]), 0);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
        assert_eq!(argmax_lowest(&[0.2, 0.5, 0.3]), 1);
    }

    #[test]
    fn fc_head_validates_and_runs() {
        let config = tiny_config(3, HeadKind::GapFcSoftmax { widths: vec![8, 4], dropout: 0.5 });
        let model = Backbone::build(config, &mut rng(7)).unwrap();
        assert!(model.head_weights().is_err());
        let x = random_input(model.config(), &mut rng(8));
        let trace = model.forward(&x, Mode::Eval).unwrap();
        let sum: f64 = trace.probabilities.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let model = Backbone::build(tiny_config(3, HeadKind::GapSoftmax), &mut rng(9)).unwrap();
        let bytes = model.to_bytes().unwrap();
        let back = Backbone::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in model.params().iter().zip(back.params()) {
            let ba: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "parameter {}", a.name);
        }
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn transfer_zero_slice_identity() {
        let src = Backbone::build(tiny_config(3, HeadKind::GapSoftmax), &mut rng(10)).unwrap();
        let mut dst = Backbone::build(tiny_config(4, HeadKind::GapSoftmax), &mut rng(11)).unwrap();
        transfer_weights(&src, &mut dst).unwrap();
        let mut r = rng(12);
        for _ in 0..10 {
            let x3 = random_input(src.config(), &mut r);
            let mut padded = Vec::with_capacity(4 * 16 * 16);
            padded.extend_from_slice(x3.data());
            padded.extend_from_slice(&[0.0; 16 * 16]);
            let x4 = Tensor::new(vec![4, 16, 16], padded).unwrap();
            let a = src.forward(&x3, Mode::Eval).unwrap();
            let b = dst.forward(&x4, Mode::Eval).unwrap();
            for (la, lb) in a.logits.data().iter().zip(b.logits.data()) {
                assert!((la - lb).abs() < 1e-9, "{la} vs {lb}");
            }
        }
    }

    #[test]
    fn transfer_then_training_diverges() {
        use crate::tensor::{adam_update, AdamState};
        let src = Backbone::build(tiny_config(3, HeadKind::GapSoftmax), &mut rng(13)).unwrap();
        let mut dst = Backbone::build(tiny_config(4, HeadKind::GapSoftmax), &mut rng(14)).unwrap();
        transfer_weights(&src, &mut dst).unwrap();
        let mut r = rng(15);
        let n = 4 * 16 * 16;
        let xb = Tensor::new(
            vec![2, 4, 16, 16],
            (0..2 * n).map(|_| r.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(xb);
        let built = dst.build_forward(&mut tape, xn, Mode::Train, Some(&mut r)).unwrap();
        let loss = tape.cross_entropy(built.probabilities, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        let mut adam = AdamState::new(&dst.trainable_sizes(), 1e-2);
        let grads: Vec<(usize, Vec<f64>)> = built
            .param_nodes
            .iter()
            .map(|&(pi, node)| (pi, tape.grad(node).to_vec()))
            .collect();
        drop(tape);
        let mut grad_iter = grads.iter();
        let mut pairs: Vec<(&mut [f64], &[f64])> = dst
            .params_mut()
            .iter_mut()
            .filter(|p| p.trainable)
            .map(|p| {
                let (_, g) = grad_iter.next().unwrap();
                (p.tensor.data_mut(), g.as_slice())
            })
            .collect();
        adam_update(&mut adam, &mut pairs).unwrap();
        let shared = dst.param("stage1.conv0.kernel").unwrap();
        let original = src.param("stage1.conv0.kernel").unwrap();
        assert_ne!(shared.data(), original.data());
    }

    #[test]
    fn transfer_mismatch_rejected() {
        let src = Backbone::build(tiny_config(3, HeadKind::GapSoftmax), &mut rng(16)).unwrap();
        let mut other = tiny_config(4, HeadKind::GapSoftmax);
        other.stages.pop();
        other.input_size = 16;
        let mut dst = Backbone::build(other, &mut rng(17)).unwrap();
        assert!(transfer_weights(&src, &mut dst).is_err());
    }

    #[test]
    fn composed_backbone_gradients_match_finite_differences() {
        // Small 4-stage network, FD over every trainable parameter.
        let config = tiny_config(3, HeadKind::GapSoftmax);
        let mut r = rng(18);
        let model = Backbone::build(config.clone(), &mut r).unwrap();
        let x = random_input(&config, &mut r);
        let run = |m: &Backbone| {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let built = m.build_forward(&mut tape, xn, Mode::Eval, None).unwrap();
            let loss = tape.cross_entropy(built.probabilities, &[1]).unwrap();
            (tape, built, loss)
        };
        let (mut tape, built, loss) = run(&model);
        tape.backward(loss).unwrap();
        let eps = 1e-5;
        for &(pi, node) in &built.param_nodes {
            let analytic = tape.grad(node).to_vec();
            let name = model.params()[pi].name.clone();
            let n = model.params()[pi].tensor.numel();
            // Probe a few coordinates per parameter to keep this quick.
            for ci in [0, n / 2, n - 1] {
                let mut probe = model.clone();
                let base = probe.params()[pi].tensor.data()[ci];
                probe.params_mut()[pi].tensor.data_mut()[ci] = base + eps;
                let hi = {
                    let (t, _, l) = run(&probe);
                    t.value(l).data()[0]
                };
                probe.params_mut()[pi].tensor.data_mut()[ci] = base - eps;
                let lo = {
                    let (t, _, l) = run(&probe);
                    t.value(l).data()[0]
                };
                let numeric = (hi - lo) / (2.0 * eps);
                let a = analytic[ci];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-4, "{name}[{ci}]: analytic {a}, numeric {numeric}");
            }
        }
    }
}
