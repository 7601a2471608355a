//! The attribute network: a residual backbone whose per-block rectified
//! activation maps are global-average-pooled, concatenated, and
//! L2-normalized into a merge vector feeding eight attribute heads —
//! six scalar regressors and two classifiers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{ImageBatch, PixelRange};
use crate::log::{LogRecord, TrainingLog};
use crate::nn::{BoundConv, BoundLinear, Conv2dLayer, Init, LinearLayer, ParamCollector};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, StreamId};
use crate::scalar::{c, to_f64, Scalar};
use crate::schema::{
    label_to_model_space, AttributeLabel, AttributeSchema, ATTRIBUTE_COUNT, SCALAR_ATTRIBUTE_COUNT,
};
use crate::tensor::Tensor;

/// Epsilon under the square root in the merge-layer normalization.
pub const MERGE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub block_count: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub preset: String,
    pub stages: Vec<StageConfig>,
    /// Square training resolution. Inference accepts any square size.
    pub input_size: usize,
}

impl BackboneConfig {
    /// Four-stage, one-block-per-stage miniature for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            stages: [16, 32, 64, 128]
                .iter()
                .map(|&channels| StageConfig { block_count: 1, channels })
                .collect(),
            input_size: 64,
        }
    }

    /// The 16-block layout of the 50-layer residual network.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            stages: vec![
                StageConfig { block_count: 3, channels: 256 },
                StageConfig { block_count: 4, channels: 512 },
                StageConfig { block_count: 6, channels: 1024 },
                StageConfig { block_count: 3, channels: 2048 },
            ],
            input_size: 256,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown backbone preset '{other}'"))),
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.block_count == 0 {
                return Err(Error::Config(format!("stage {i} has zero blocks")));
            }
            if s.channels == 0 || s.channels % 4 != 0 {
                return Err(Error::Config(format!(
                    "stage {i} channels must be a positive multiple of 4 (bottleneck width), got {}",
                    s.channels
                )));
            }
        }
        if self.input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.block_count).sum()
    }

    /// Dimension of the merge vector: one GAP value per channel per block.
    pub fn merge_dim(&self) -> usize {
        self.stages.iter().map(|s| s.block_count * s.channels).sum()
    }

    pub fn stem_channels(&self) -> usize {
        self.stages[0].channels / 4
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BottleneckBlock<F> {
    reduce: Conv2dLayer<F>,
    mid: Conv2dLayer<F>,
    expand: Conv2dLayer<F>,
    skip: Option<Conv2dLayer<F>>,
}

impl<F: Scalar> BottleneckBlock<F> {
    fn init(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid_ch = out_ch / 4;
        let skip = if stride != 1 || in_ch != out_ch {
            Some(Conv2dLayer::init(in_ch, out_ch, 1, stride, 0, Init::He, rng))
        } else {
            None
        };
        Self {
            reduce: Conv2dLayer::init(in_ch, mid_ch, 1, 1, 0, Init::He, rng),
            mid: Conv2dLayer::init(mid_ch, mid_ch, 3, stride, 1, Init::He, rng),
            expand: Conv2dLayer::init(mid_ch, out_ch, 1, 1, 0, Init::He, rng),
            skip,
        }
    }
}

struct BoundBlock {
    reduce: BoundConv,
    mid: BoundConv,
    expand: BoundConv,
    skip: Option<BoundConv>,
}

impl BoundBlock {
    /// Returns the block's output after its final rectification.
    fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let h = self.reduce.apply(tape, x);
        let h = tape.relu(h);
        let h = self.mid.apply(tape, h);
        let h = tape.relu(h);
        let h = self.expand.apply(tape, h);
        let shortcut = match &self.skip {
            Some(conv) => conv.apply(tape, x),
            None => x,
        };
        let sum = tape.add(h, shortcut);
        tape.relu(sum)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AcanHeads<F> {
    /// Six single-output regressors in schema order.
    scalar: Vec<LinearLayer<F>>,
    /// Two classifiers: primary color (12-way), harmony (3-way).
    categorical: Vec<LinearLayer<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcanModel<F> {
    pub config: BackboneConfig,
    pub schema: AttributeSchema,
    stem: Conv2dLayer<F>,
    blocks: Vec<BottleneckBlock<F>>,
    heads: AcanHeads<F>,
}

/// Tape-bound model; `params` lists trainable vars in canonical order.
pub struct AcanVars {
    stem: BoundConv,
    blocks: Vec<BoundBlock>,
    scalar_heads: Vec<BoundLinear>,
    categorical_heads: Vec<BoundLinear>,
    pub params: Vec<Var>,
}

/// Raw head outputs on a tape: `scalars[i]` is `[N,1]`, `logits[j]` is `[N,K_j]`.
pub struct HeadOutputs {
    pub scalars: Vec<Var>,
    pub logits: Vec<Var>,
}

/// Deterministic construction from a seed; heads and backbone draw from
/// one init stream in a fixed order.
pub fn build_acan<F: Scalar>(
    config: &BackboneConfig,
    schema: &AttributeSchema,
    seed: u64,
) -> Result<AcanModel<F>> {
    config.validate()?;
    schema.validate()?;
    let mut rng = stream(seed, StreamId::AcanInit);
    let stem = Conv2dLayer::init(3, config.stem_channels(), 7, 2, 3, Init::He, &mut rng);
    let mut blocks = Vec::with_capacity(config.total_blocks());
    let mut in_ch = config.stem_channels();
    for (stage_idx, stage) in config.stages.iter().enumerate() {
        for block_idx in 0..stage.block_count {
            // Stage 0 keeps the post-stem resolution; later stages halve it
            // at their first block.
            let stride = if stage_idx > 0 && block_idx == 0 { 2 } else { 1 };
            blocks.push(BottleneckBlock::init(in_ch, stage.channels, stride, &mut rng));
            in_ch = stage.channels;
        }
    }
    let merge_dim = config.merge_dim();
    let scalar = (0..SCALAR_ATTRIBUTE_COUNT)
        .map(|_| LinearLayer::init(merge_dim, 1, Init::He, &mut rng))
        .collect();
    let categorical = (SCALAR_ATTRIBUTE_COUNT..ATTRIBUTE_COUNT)
        .map(|i| LinearLayer::init(merge_dim, schema.class_count(i), Init::He, &mut rng))
        .collect();
    Ok(AcanModel {
        config: config.clone(),
        schema: schema.clone(),
        stem,
        blocks,
        heads: AcanHeads { scalar, categorical },
    })
}

impl<F: Scalar> AcanModel<F> {
    /// Copies parameters onto a tape. Binding order is the canonical
    /// parameter order; `named_params`/`params_mut` must stay in sync.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> AcanVars {
        let mut params = Vec::new();
        let stem = self.stem.bind(tape, trainable, &mut params);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                reduce: b.reduce.bind(tape, trainable, &mut params),
                mid: b.mid.bind(tape, trainable, &mut params),
                expand: b.expand.bind(tape, trainable, &mut params),
                skip: b.skip.as_ref().map(|s| s.bind(tape, trainable, &mut params)),
            })
            .collect();
        let scalar_heads = self
            .heads
            .scalar
            .iter()
            .map(|h| h.bind(tape, trainable, &mut params))
            .collect();
        let categorical_heads = self
            .heads
            .categorical
            .iter()
            .map(|h| h.bind(tape, trainable, &mut params))
            .collect();
        AcanVars { stem, blocks, scalar_heads, categorical_heads, params }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut pc = ParamCollector::new();
        pc.scoped("stem", |pc| {
            pc.push("w", &self.stem.w);
            pc.push("b", &self.stem.b);
        });
        for (i, b) in self.blocks.iter().enumerate() {
            pc.scoped(&format!("block{i}"), |pc| {
                for (name, layer) in [("reduce", &b.reduce), ("mid", &b.mid), ("expand", &b.expand)] {
                    pc.scoped(name, |pc| {
                        pc.push("w", &layer.w);
                        pc.push("b", &layer.b);
                    });
                }
                if let Some(skip) = &b.skip {
                    pc.scoped("skip", |pc| {
                        pc.push("w", &skip.w);
                        pc.push("b", &skip.b);
                    });
                }
            });
        }
        let names = self.schema.attribute_names();
        for (i, h) in self.heads.scalar.iter().enumerate() {
            pc.scoped(&format!("head.{}", names[i]), |pc| {
                pc.push("w", &h.w);
                pc.push("b", &h.b);
            });
        }
        for (i, h) in self.heads.categorical.iter().enumerate() {
            pc.scoped(&format!("head.{}", names[SCALAR_ATTRIBUTE_COUNT + i]), |pc| {
                pc.push("w", &h.w);
                pc.push("b", &h.b);
            });
        }
        pc.finish()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::new();
        out.push(&mut self.stem.w);
        out.push(&mut self.stem.b);
        for b in &mut self.blocks {
            out.push(&mut b.reduce.w);
            out.push(&mut b.reduce.b);
            out.push(&mut b.mid.w);
            out.push(&mut b.mid.b);
            out.push(&mut b.expand.w);
            out.push(&mut b.expand.b);
            if let Some(skip) = &mut b.skip {
                out.push(&mut skip.w);
                out.push(&mut skip.b);
            }
        }
        for h in &mut self.heads.scalar {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        for h in &mut self.heads.categorical {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Exact byte image of all parameters, for frozen-contract checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named_params() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    /// Backbone-weight load hook (externally pretrained stem + blocks).
    /// Head parameters are left untouched.
    pub fn load_backbone_weights(&mut self, source: &[(String, Tensor<F>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor<F>> =
            source.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected: Vec<String> = self
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !n.starts_with("head."))
            .collect();
        for name in &expected {
            let incoming = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("missing backbone weight '{name}'")))?;
            let incoming = (*incoming).clone();
            // match shapes before committing anything
            let current = self
                .named_params()
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape().to_vec())
                .unwrap();
            if incoming.shape() != current.as_slice() {
                return Err(Error::Config(format!(
                    "backbone weight '{name}' shape {:?} != expected {:?}",
                    incoming.shape(),
                    current
                )));
            }
        }
        let names: Vec<String> = self.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, tensor) in names.iter().zip(self.params_mut()) {
            if let Some(incoming) = lookup.get(name.as_str()) {
                if !name.starts_with("head.") {
                    *tensor = (*incoming).clone();
                }
            }
        }
        Ok(())
    }

    fn validate_input(&self, images: &ImageBatch<F>) -> Result<()> {
        if images.range() != PixelRange::Unit {
            return Err(Error::Input(
                "attribute network expects [0,1] images; convert with to_range".into(),
            ));
        }
        if images.height() != images.width() {
            return Err(Error::Input(format!(
                "attribute network expects square inputs, got {}x{}",
                images.height(),
                images.width()
            )));
        }
        Ok(())
    }
}

impl AcanVars {
    /// Stem then blocks; returns each block's post-rectification map.
    pub fn block_maps<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Vec<Var> {
        let mut h = self.stem.apply(tape, x);
        h = tape.relu(h);
        h = tape.maxpool2d_3x3s2(h);
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.apply(tape, h);
            maps.push(h);
        }
        maps
    }

    /// GAP each block map, concatenate, L2-normalize.
    pub fn merged<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let maps = self.block_maps(tape, x);
        let pooled: Vec<Var> = maps.iter().map(|&m| tape.global_avg_pool(m)).collect();
        let cat = tape.concat_cols(&pooled);
        tape.l2_normalize_rows(cat, c(MERGE_EPS))
    }

    pub fn heads<F: Scalar>(&self, tape: &mut Tape<F>, merged: Var) -> HeadOutputs {
        let scalars = self.scalar_heads.iter().map(|h| h.apply(tape, merged)).collect();
        let logits = self.categorical_heads.iter().map(|h| h.apply(tape, merged)).collect();
        HeadOutputs { scalars, logits }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> HeadOutputs {
        let merged = self.merged(tape, x);
        self.heads(tape, merged)
    }
}

/// One rectified activation map per residual block, in depth order.
pub fn extract_block_features<F: Scalar>(
    model: &AcanModel<F>,
    images: &ImageBatch<F>,
) -> Result<Vec<Tensor<F>>> {
    model.validate_input(images)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.leaf(images.tensor().clone());
    let maps = vars.block_maps(&mut tape, x);
    Ok(maps.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Spatial mean per map, concatenated in block order, then per-sample
/// L2 normalization. Standalone counterpart of the tape path.
pub fn gap_merge<F: Scalar>(features: &[Tensor<F>]) -> Result<Tensor<F>> {
    if features.is_empty() {
        return Err(Error::Input("gap_merge needs at least one feature map".into()));
    }
    let n = features[0].shape()[0];
    let mut rows: Vec<Vec<F>> = vec![Vec::new(); n];
    for map in features {
        let s = map.shape();
        if s.len() != 4 || s[0] != n {
            return Err(Error::Input(format!(
                "feature maps must be [N,C,H,W] with shared batch, got {s:?}"
            )));
        }
        let (ch, hw) = (s[1], s[2] * s[3]);
        let denom = c::<F>(hw as f64);
        for sample in 0..n {
            for cc in 0..ch {
                let base = (sample * ch + cc) * hw;
                let mean = map.data()[base..base + hw].iter().copied().sum::<F>() / denom;
                rows[sample].push(mean);
            }
        }
    }
    let d = rows[0].len();
    let eps = c::<F>(MERGE_EPS);
    let mut out = Vec::with_capacity(n * d);
    for row in rows {
        let scale = (row.iter().map(|&v| v * v).sum::<F>() + eps).sqrt().recip();
        out.extend(row.into_iter().map(|v| v * scale));
    }
    Tensor::new(vec![n, d], out)
}

/// Per-sample head outputs: raw scalar regressions (model space) and
/// softmax class distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePrediction {
    pub scalars: Vec<[f64; SCALAR_ATTRIBUTE_COUNT]>,
    pub primary_color: Vec<Vec<f64>>,
    pub color_harmony: Vec<Vec<f64>>,
}

impl AttributePrediction {
    pub fn count(&self) -> usize {
        self.scalars.len()
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        for dist_set in [(&self.primary_color, 6), (&self.color_harmony, 7)] {
            let (dists, idx) = dist_set;
            if dists.len() != self.scalars.len() {
                return Err(Error::Input("prediction batch sizes disagree".into()));
            }
            for d in dists.iter() {
                if d.len() != schema.class_count(idx) {
                    return Err(Error::Input("class distribution has wrong arity".into()));
                }
                let sum: f64 = d.iter().sum();
                if (sum - 1.0).abs() > 1e-5 || d.iter().any(|&p| p < 0.0) {
                    return Err(Error::Numeric(format!(
                        "class distribution not normalized (sum {sum})"
                    )));
                }
            }
        }
        for row in &self.scalars {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite scalar prediction".into()));
            }
        }
        Ok(())
    }

    /// Scalar outputs clamped to [0,1] and reported on the 1–10 scale.
    pub fn scalar_labels(&self, sample: usize) -> [f64; SCALAR_ATTRIBUTE_COUNT] {
        let mut out = [0.0; SCALAR_ATTRIBUTE_COUNT];
        for (i, &v) in self.scalars[sample].iter().enumerate() {
            out[i] = 1.0 + 9.0 * v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn predicted_primary_color(&self, sample: usize) -> usize {
        argmax(&self.primary_color[sample])
    }

    pub fn predicted_harmony(&self, sample: usize) -> usize {
        argmax(&self.color_harmony[sample])
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn predict_attributes<F: Scalar>(
    model: &AcanModel<F>,
    images: &ImageBatch<F>,
) -> Result<AttributePrediction> {
    model.validate_input(images)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.leaf(images.tensor().clone());
    let out = vars.forward(&mut tape, x);
    let n = images.count();

    let mut scalars = vec![[0.0; SCALAR_ATTRIBUTE_COUNT]; n];
    for (attr, &var) in out.scalars.iter().enumerate() {
        let v = tape.value(var);
        for sample in 0..n {
            scalars[sample][attr] = to_f64(v.data()[sample]);
        }
    }
    let mut dists: Vec<Vec<Vec<f64>>> = Vec::new();
    for &var in &out.logits {
        let v = tape.value(var);
        let k = v.shape()[1];
        let mut per_sample = Vec::with_capacity(n);
        for sample in 0..n {
            let row: Vec<f64> = v.data()[sample * k..(sample + 1) * k]
                .iter()
                .map(|&z| to_f64(z))
                .collect();
            per_sample.push(softmax_f64(&row));
        }
        dists.push(per_sample);
    }
    let prediction = AttributePrediction {
        scalars,
        primary_color: dists[0].clone(),
        color_harmony: dists[1].clone(),
    };
    prediction.validate(&model.schema)?;
    Ok(prediction)
}

/// Supervised objective value with its per-attribute decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedLoss {
    pub total: f64,
    pub per_attribute: [f64; ATTRIBUTE_COUNT],
}

/// Mean squared error on scalar heads (labels mapped to [0,1]) plus
/// cross-entropy on the categorical heads, averaged over the batch.
pub fn acan_supervised_loss(
    pred: &AttributePrediction,
    labels: &[AttributeLabel],
    schema: &AttributeSchema,
) -> Result<SupervisedLoss> {
    if pred.count() != labels.len() {
        return Err(Error::Label(format!(
            "{} predictions vs {} labels",
            pred.count(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Label("empty label batch".into()));
    }
    for l in labels {
        l.validate(schema)?;
    }
    let n = labels.len() as f64;
    let mut per_attribute = [0.0; ATTRIBUTE_COUNT];
    for (sample, label) in labels.iter().enumerate() {
        for attr in 0..SCALAR_ATTRIBUTE_COUNT {
            let diff = pred.scalars[sample][attr] - label_to_model_space(label.scalars[attr]);
            per_attribute[attr] += diff * diff / n;
        }
        per_attribute[6] += -pred.primary_color[sample][label.primary_color].ln() / n;
        per_attribute[7] += -pred.color_harmony[sample][label.color_harmony].ln() / n;
    }
    let total = per_attribute.iter().sum();
    Ok(SupervisedLoss { total, per_attribute })
}

/// Tape-side version of the supervised objective, for training and
/// gradient checks. Returns (total, eight per-attribute terms).
pub fn supervised_loss_vars<F: Scalar>(
    tape: &mut Tape<F>,
    outputs: &HeadOutputs,
    labels: &[AttributeLabel],
) -> (Var, Vec<Var>) {
    let n = labels.len();
    let mut terms = Vec::with_capacity(ATTRIBUTE_COUNT);
    for (attr, &pred) in outputs.scalars.iter().enumerate() {
        let target: Vec<F> = labels
            .iter()
            .map(|l| c(label_to_model_space(l.scalars[attr])))
            .collect();
        let target = tape.leaf(Tensor::new(vec![n, 1], target).unwrap());
        let diff = tape.sub(pred, target);
        let sq = tape.hadamard(diff, diff);
        terms.push(tape.mean_all(sq));
    }
    let color_targets: Vec<usize> = labels.iter().map(|l| l.primary_color).collect();
    terms.push(tape.softmax_cross_entropy(outputs.logits[0], &color_targets));
    let harmony_targets: Vec<usize> = labels.iter().map(|l| l.color_harmony).collect();
    terms.push(tape.softmax_cross_entropy(outputs.logits[1], &harmony_targets));

    let weights: Vec<(Var, F)> = terms.iter().map(|&t| (t, F::one())).collect();
    let total = tape.weighted_sum(&weights);
    (total, terms)
}

/// Per-attribute target-discrepancy terms on a tape: squared error in
/// model space for weighted scalar attributes, cross-entropy against the
/// target class for weighted categorical ones. Unweighted attributes
/// yield `None` and never enter the graph.
pub fn attribute_loss_terms_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    outputs: &HeadOutputs,
    target: &crate::guidance::AttributeTarget,
    batch: usize,
) -> Vec<Option<Var>> {
    use crate::guidance::TargetValue;
    let mut terms = Vec::with_capacity(ATTRIBUTE_COUNT);
    for (idx, entry) in target.entries().iter().enumerate() {
        if entry.weight == 0.0 {
            terms.push(None);
            continue;
        }
        let term = match entry.value {
            TargetValue::Scalar(v) => {
                let t = c::<F>(label_to_model_space(v));
                let target_tensor = tape.leaf(Tensor::full(vec![batch, 1], t));
                let diff = tape.sub(outputs.scalars[idx], target_tensor);
                let sq = tape.hadamard(diff, diff);
                tape.mean_all(sq)
            }
            TargetValue::Class(k) => {
                let logits = outputs.logits[idx - SCALAR_ATTRIBUTE_COUNT];
                let classes = vec![k; batch];
                tape.softmax_cross_entropy(logits, &classes)
            }
        };
        terms.push(Some(term));
    }
    terms
}

/// In-memory labeled image set, the unit the trainer consumes.
#[derive(Debug, Clone)]
pub struct LabeledImageSet<F> {
    pub images: ImageBatch<F>,
    pub labels: Vec<AttributeLabel>,
}

impl<F: Scalar> LabeledImageSet<F> {
    pub fn new(images: ImageBatch<F>, labels: Vec<AttributeLabel>) -> Result<Self> {
        if images.count() != labels.len() {
            return Err(Error::Data(format!(
                "{} images vs {} labels",
                images.count(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet<F> {
        LabeledImageSet {
            images: self.images.permuted(indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl AcanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Resumable training state: model, optimizer moments, shuffle stream.
pub struct AcanTrainer<F: Scalar> {
    pub model: AcanModel<F>,
    pub optimizer: Adam<F>,
    pub shuffle_rng: ChaCha8Rng,
    pub epochs_done: usize,
}

impl<F: Scalar> AcanTrainer<F> {
    pub fn new(
        backbone: &BackboneConfig,
        schema: &AttributeSchema,
        cfg: &AcanTrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = build_acan(backbone, schema, seed)?;
        let shapes = model.param_shapes();
        Ok(Self {
            model,
            optimizer: Adam::new(AdamConfig::standard(cfg.lr), &shapes),
            shuffle_rng: stream(seed, StreamId::AcanShuffle),
            epochs_done: 0,
        })
    }

    /// Runs `epochs` additional epochs, appending one record per epoch.
    pub fn run(
        &mut self,
        data: &LabeledImageSet<F>,
        cfg: &AcanTrainConfig,
        epochs: usize,
        log: &mut TrainingLog,
    ) -> Result<()> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        for l in &data.labels {
            l.validate(&self.model.schema)?;
        }
        for _ in 0..epochs {
            let (loss, per_attribute) = self.train_epoch(data, cfg.batch_size)?;
            self.epochs_done += 1;
            let mut record = LogRecord::AcanEpoch {
                epoch: self.epochs_done,
                loss,
                per_attribute: per_attribute.to_vec(),
            ts: None,
            };
            record.stamp_now();
            log.push(record);
        }
        Ok(())
    }

    fn train_epoch(
        &mut self,
        data: &LabeledImageSet<F>,
        batch_size: usize,
    ) -> Result<(f64, [f64; ATTRIBUTE_COUNT])> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_terms = [0.0; ATTRIBUTE_COUNT];
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch = data.subset(chunk);
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape, true);
            let x = tape.leaf(batch.images.tensor().clone());
            let outputs = vars.forward(&mut tape, x);
            let (total, terms) = supervised_loss_vars(&mut tape, &outputs, &batch.labels);
            let grads = tape.backward(total);

            let grad_refs: Vec<Option<&Tensor<F>>> =
                vars.params.iter().map(|&v| grads.wrt(v)).collect();
            let mut params = self.model.params_mut();
            self.optimizer.step(&mut params, &grad_refs);

            let w = chunk.len() as f64;
            epoch_loss += to_f64(tape.value(total).item()) * w;
            for (i, &t) in terms.iter().enumerate() {
                epoch_terms[i] += to_f64(tape.value(t).item()) * w;
            }
            seen += chunk.len();
        }
        let n = seen as f64;
        epoch_loss /= n;
        for t in &mut epoch_terms {
            *t /= n;
        }
        Ok((epoch_loss, epoch_terms))
    }
}

/// Builds and trains a fresh model; the one-call training entry point.
pub fn train_acan<F: Scalar>(
    data: &LabeledImageSet<F>,
    backbone: &BackboneConfig,
    cfg: &AcanTrainConfig,
    seed: u64,
) -> Result<(AcanModel<F>, TrainingLog)> {
    let mut trainer = AcanTrainer::new(backbone, &AttributeSchema::canonical(), cfg, seed)?;
    let mut log = TrainingLog::new();
    trainer.run(data, cfg, cfg.epochs, &mut log)?;
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_images(n: usize, size: usize, fill: f32) -> ImageBatch<f32> {
        ImageBatch::new(
            Tensor::full(vec![n, 3, size, size], fill),
            PixelRange::Unit,
        )
        .unwrap()
    }

    #[test]
    fn merge_dims_match_block_channel_products() {
        assert_eq!(BackboneConfig::toy().merge_dim(), 240);
        assert_eq!(BackboneConfig::toy().total_blocks(), 4);
        assert_eq!(BackboneConfig::paper().merge_dim(), 15104);
        assert_eq!(BackboneConfig::paper().total_blocks(), 16);
    }

    #[test]
    fn empty_backbone_is_rejected() {
        let cfg = BackboneConfig { preset: "custom".into(), stages: vec![], input_size: 64 };
        assert!(matches!(
            build_acan::<f32>(&cfg, &AttributeSchema::canonical(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toy_features_are_nonnegative_and_counted() {
        let model = build_acan::<f32>(&BackboneConfig::toy(), &AttributeSchema::canonical(), 1).unwrap();
        let maps = extract_block_features(&model, &toy_images(2, 16, 0.5)).unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            assert_eq!(m.shape()[0], 2);
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_input_yields_finite_features() {
        let model = build_acan::<f32>(&BackboneConfig::toy(), &AttributeSchema::canonical(), 1).unwrap();
        let maps = extract_block_features(&model, &toy_images(1, 16, 0.0)).unwrap();
        for m in &maps {
            assert!(m.all_finite());
        }
    }

    #[test]
    fn non_square_or_wrong_range_inputs_are_rejected() {
        let model = build_acan::<f32>(&BackboneConfig::toy(), &AttributeSchema::canonical(), 1).unwrap();
        let rect = ImageBatch::new(Tensor::full(vec![1, 3, 8, 16], 0.5f32), PixelRange::Unit).unwrap();
        assert!(extract_block_features(&model, &rect).is_err());
        let sym = toy_images(1, 16, 0.5).to_range(PixelRange::Symmetric);
        assert!(extract_block_features(&model, &sym).is_err());
    }

    #[test]
    fn gap_merge_single_map_normalizes_to_one() {
        let map = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        // pre-norm GAP value is 2.5; a single-element vector normalizes to 1
        let merged = gap_merge(&[map]).unwrap();
        assert_eq!(merged.shape(), &[1, 1]);
        assert!((merged.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gap_merge_three_four_five() {
        let a = Tensor::new(vec![1, 1, 1, 1], vec![3.0f64]).unwrap();
        let b = Tensor::new(vec![1, 1, 1, 1], vec![4.0f64]).unwrap();
        let merged = gap_merge(&[a, b]).unwrap();
        assert!((merged.data()[0] - 0.6).abs() < 1e-9);
        assert!((merged.data()[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn gap_merge_rejects_empty_list() {
        assert!(gap_merge::<f64>(&[]).is_err());
    }

    #[test]
    fn predictions_have_schema_arity_and_normalized_dists() {
        let model = build_acan::<f32>(&BackboneConfig::toy(), &AttributeSchema::canonical(), 3).unwrap();
        let pred = predict_attributes(&model, &toy_images(2, 16, 0.25)).unwrap();
        assert_eq!(pred.count(), 2);
        assert_eq!(pred.primary_color[0].len(), 12);
        assert_eq!(pred.color_harmony[0].len(), 3);
        for d in pred.primary_color.iter().chain(pred.color_harmony.iter()) {
            let sum: f64 = d.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicated_samples_predict_identically() {
        let model = build_acan::<f32>(&BackboneConfig::toy(), &AttributeSchema::canonical(), 3).unwrap();
        let one = toy_images(1, 16, 0.3);
        let two = ImageBatch::stack(&[one.clone(), one]).unwrap();
        let pred = predict_attributes(&model, &two).unwrap();
        assert_eq!(pred.scalars[0], pred.scalars[1]);
        assert_eq!(pred.primary_color[0], pred.primary_color[1]);
    }

    #[test]
    fn supervised_loss_zero_iff_exact() {
        let schema = AttributeSchema::canonical();
        let label = AttributeLabel {
            scalars: [1.0, 2.0, 3.0, 4.0, 10.0, 6.0],
            primary_color: 4,
            color_harmony: 1,
        };
        let mut onehot_color = vec![0.0; 12];
        onehot_color[4] = 1.0;
        let mut onehot_harmony = vec![0.0; 3];
        onehot_harmony[1] = 1.0;
        let exact = AttributePrediction {
            scalars: vec![[0.0, 1.0 / 9.0, 2.0 / 9.0, 3.0 / 9.0, 1.0, 5.0 / 9.0]],
            primary_color: vec![onehot_color],
            color_harmony: vec![onehot_harmony],
        };
        let loss = acan_supervised_loss(&exact, &[label.clone()], &schema).unwrap();
        assert_eq!(loss.total, 0.0);

        // label 10 maps to 1.0; predicting 0.5 leaves squared error 0.25
        let mut off = exact;
        off.scalars[0][4] = 0.5;
        let loss = acan_supervised_loss(&off, &[label], &schema).unwrap();
        assert!((loss.per_attribute[4] - 0.25).abs() < 1e-12);
        assert!((loss.total - 0.25).abs() < 1e-12);
    }

    #[test]
    fn uniform_harmony_distribution_costs_ln3() {
        let schema = AttributeSchema::canonical();
        let label = AttributeLabel {
            scalars: [1.0; 6],
            primary_color: 0,
            color_harmony: 2,
        };
        let mut onehot_color = vec![0.0; 12];
        onehot_color[0] = 1.0;
        let pred = AttributePrediction {
            scalars: vec![[0.0; 6]],
            primary_color: vec![onehot_color],
            color_harmony: vec![vec![1.0 / 3.0; 3]],
        };
        let loss = acan_supervised_loss(&pred, &[label], &schema).unwrap();
        assert!((loss.per_attribute[7] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let schema = AttributeSchema::canonical();
        let pred = AttributePrediction {
            scalars: vec![[0.0; 6]],
            primary_color: vec![vec![1.0 / 12.0; 12]],
            color_harmony: vec![vec![1.0 / 3.0; 3]],
        };
        let bad = AttributeLabel {
            scalars: [1.0, 1.0, 1.0, 1.0, 11.0, 1.0],
            primary_color: 0,
            color_harmony: 0,
        };
        assert!(acan_supervised_loss(&pred, &[bad], &schema).is_err());
    }

    #[test]
    fn loss_decomposition_sums_to_total() {
        let schema = AttributeSchema::canonical();
        let pred = AttributePrediction {
            scalars: vec![[0.2, 0.4, 0.6, 0.8, 0.1, 0.9]],
            primary_color: vec![vec![1.0 / 12.0; 12]],
            color_harmony: vec![vec![0.5, 0.25, 0.25]],
        };
        let label = AttributeLabel {
            scalars: [5.0, 5.0, 5.0, 5.0, 5.0, 5.0],
            primary_color: 3,
            color_harmony: 0,
        };
        let loss = acan_supervised_loss(&pred, &[label], &schema).unwrap();
        let sum: f64 = loss.per_attribute.iter().sum();
        assert_eq!(loss.total, sum);
        assert!(loss.per_attribute.iter().all(|&t| t >= 0.0));
    }
}
