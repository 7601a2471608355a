//! Attribute guidance: scoring translated images with a frozen attribute
//! network against user-commanded target values, and folding the
//! resulting eight losses into the generator objective.

use serde::{Deserialize, Serialize};

use crate::acan::{attribute_loss_terms_on_tape, AcanModel, AttributePrediction};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gan::{adversarial_loss_var, mad_loss_var, GanConfig, GanPair, ImagePool};
use crate::image::{ImageBatch, PixelRange};
use crate::optim::{Adam, AdamConfig};
use crate::rng::StreamId;
use crate::scalar::{c, to_f64, Scalar};
use crate::schema::{label_to_model_space, AttributeSchema, ATTRIBUTE_COUNT, SCALAR_ATTRIBUTE_COUNT};
use crate::tensor::Tensor;

/// One commanded value: a 1–10 scalar or a class index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetValue {
    Scalar(f64),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub value: TargetValue,
    pub weight: f64,
}

/// Eight per-attribute entries in schema order. Attributes the user did
/// not mention carry weight 0 and a neutral placeholder value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTarget {
    entries: Vec<TargetEntry>,
}

impl AttributeTarget {
    /// No commanded attributes: every weight 0.
    pub fn none(schema: &AttributeSchema) -> Self {
        let entries = (0..ATTRIBUTE_COUNT)
            .map(|i| TargetEntry {
                value: if i < SCALAR_ATTRIBUTE_COUNT {
                    TargetValue::Scalar(5.5)
                } else {
                    TargetValue::Class(0)
                },
                weight: 0.0,
            })
            .collect();
        let _ = schema;
        Self { entries }
    }

    /// Builds from `(attribute name, value, optional weight)` triples.
    /// Weight defaults to 1 for attributes the user names.
    pub fn from_pairs(
        schema: &AttributeSchema,
        pairs: &[(&str, TargetValue, Option<f64>)],
    ) -> Result<Self> {
        let mut target = Self::none(schema);
        for (name, value, weight) in pairs {
            let idx = schema
                .index_of(name)
                .ok_or_else(|| Error::Target(format!("unknown attribute '{name}'")))?;
            let weight = weight.unwrap_or(1.0);
            if !weight.is_finite() || weight < 0.0 {
                return Err(Error::Target(format!(
                    "weight for '{name}' must be finite and >= 0, got {weight}"
                )));
            }
            match (idx < SCALAR_ATTRIBUTE_COUNT, value) {
                (true, TargetValue::Scalar(v)) => {
                    if !(1.0..=10.0).contains(v) {
                        return Err(Error::Target(format!(
                            "scalar target for '{name}' must lie in [1,10], got {v}"
                        )));
                    }
                }
                (false, TargetValue::Class(k)) => {
                    if *k >= schema.class_count(idx) {
                        return Err(Error::Target(format!(
                            "class index {k} out of range for '{name}'"
                        )));
                    }
                }
                (true, TargetValue::Class(_)) => {
                    return Err(Error::Target(format!("'{name}' takes a scalar target")))
                }
                (false, TargetValue::Scalar(_)) => {
                    return Err(Error::Target(format!("'{name}' takes a class target")))
                }
            }
            target.entries[idx] = TargetEntry { value: *value, weight };
        }
        Ok(target)
    }

    /// Parses the target document: a TOML table mapping attribute names to
    /// `{ target = <number|string>, weight = <number> }`. Unknown keys and
    /// unknown fields are rejected.
    pub fn parse_toml(text: &str, schema: &AttributeSchema) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Target(format!("target file is not valid TOML: {e}")))?;
        let mut pairs: Vec<(String, TargetValue, Option<f64>)> = Vec::new();
        for (key, value) in &table {
            let idx = schema
                .index_of(key)
                .ok_or_else(|| Error::Target(format!("unknown attribute '{key}'")))?;
            let entry = value
                .as_table()
                .ok_or_else(|| Error::Target(format!("'{key}' must be a table with a 'target' field")))?;
            for field in entry.keys() {
                if field != "target" && field != "weight" {
                    return Err(Error::Target(format!("unknown field '{field}' under '{key}'")));
                }
            }
            let raw = entry
                .get("target")
                .ok_or_else(|| Error::Target(format!("'{key}' is missing its 'target' field")))?;
            let value = if idx < SCALAR_ATTRIBUTE_COUNT {
                let v = raw
                    .as_float()
                    .or_else(|| raw.as_integer().map(|i| i as f64))
                    .ok_or_else(|| Error::Target(format!("'{key}' needs a numeric target")))?;
                TargetValue::Scalar(v)
            } else {
                let name = raw
                    .as_str()
                    .ok_or_else(|| Error::Target(format!("'{key}' needs a class-name target")))?;
                let class = schema
                    .class_index(idx, name)
                    .ok_or_else(|| Error::Target(format!("unknown class '{name}' for '{key}'")))?;
                TargetValue::Class(class)
            };
            let weight = match entry.get("weight") {
                Some(w) => Some(
                    w.as_float()
                        .or_else(|| w.as_integer().map(|i| i as f64))
                        .ok_or_else(|| Error::Target(format!("'{key}' weight must be numeric")))?,
                ),
                None => None,
            };
            pairs.push((key.clone(), value, weight));
        }
        let borrowed: Vec<(&str, TargetValue, Option<f64>)> =
            pairs.iter().map(|(n, v, w)| (n.as_str(), *v, *w)).collect();
        Self::from_pairs(schema, &borrowed)
    }

    pub fn entries(&self) -> &[TargetEntry] {
        &self.entries
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    pub fn any_weighted(&self) -> bool {
        self.entries.iter().any(|e| e.weight > 0.0)
    }
}

/// Differentiable [-1,1] -> [0,1] crossing into attribute-network space.
pub fn range_bridge<F: Scalar>(images: &ImageBatch<F>) -> Result<ImageBatch<F>> {
    if images.range() != PixelRange::Symmetric {
        return Err(Error::Input("range_bridge expects generator-space images".into()));
    }
    Ok(images.to_range(PixelRange::Unit))
}

/// Tape form of the bridge: `y = (x + 1) / 2`.
pub fn range_bridge_var<F: Scalar>(tape: &mut Tape<F>, x: Var) -> Var {
    tape.affine(x, c(0.5), c(0.5))
}

/// Per-attribute discrepancy between a prediction and the target:
/// squared error in model space for scalars, cross-entropy for
/// categoricals. Unweighted attributes report 0.
pub fn attribute_losses(
    pred: &AttributePrediction,
    target: &AttributeTarget,
    schema: &AttributeSchema,
) -> Result<[f64; ATTRIBUTE_COUNT]> {
    if target.entries.len() != ATTRIBUTE_COUNT {
        return Err(Error::Target("target must carry exactly eight entries".into()));
    }
    let n = pred.count();
    if n == 0 {
        return Err(Error::Target("prediction batch is empty".into()));
    }
    let mut out = [0.0; ATTRIBUTE_COUNT];
    for (idx, entry) in target.entries.iter().enumerate() {
        if entry.weight == 0.0 {
            continue;
        }
        match entry.value {
            TargetValue::Scalar(v) => {
                let t = label_to_model_space(v);
                let mut acc = 0.0;
                for sample in 0..n {
                    let d = pred.scalars[sample][idx] - t;
                    acc += d * d;
                }
                out[idx] = acc / n as f64;
            }
            TargetValue::Class(k) => {
                let dists = if idx == 6 { &pred.primary_color } else { &pred.color_harmony };
                if k >= schema.class_count(idx) {
                    return Err(Error::Target(format!("class {k} out of range")));
                }
                let mut acc = 0.0;
                for dist in dists.iter().take(n) {
                    acc += -dist[k].ln();
                }
                out[idx] = acc / n as f64;
            }
        }
    }
    Ok(out)
}

/// Scalar weights on the translation losses. Defaults follow the usual
/// cycle-consistency setup: adversarial 1, cycle 10, identity 5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLossWeights {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        Self { adversarial: 1.0, cycle: 10.0, identity: 5.0 }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("adversarial", self.adversarial),
            ("cycle", self.cycle),
            ("identity", self.identity),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "{name} weight must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Full weight record carried in a loss breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub attribute: Vec<f64>,
}

/// Unweighted generator-side translation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLossTerms {
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub ident_a: f64,
    pub ident_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLoss {
    pub name: String,
    pub value: f64,
}

/// Itemized generator objective. `total` is always the canonical-order
/// weighted fold of the stored terms; zero-weight terms are skipped in
/// the fold, so a run with no attribute weights reduces bitwise to the
/// plain translation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub ident_a: f64,
    pub ident_b: f64,
    pub attribute_losses: Vec<NamedLoss>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    /// The canonical accumulation: adv_ab, adv_ba, cycle_a, cycle_b,
    /// ident_a, ident_b, then the eight attributes in schema order.
    pub fn fold_total(&self) -> f64 {
        let mut total = 0.0;
        let pairs = [
            (self.adv_ab, self.weights.adversarial),
            (self.adv_ba, self.weights.adversarial),
            (self.cycle_a, self.weights.cycle),
            (self.cycle_b, self.weights.cycle),
            (self.ident_a, self.weights.identity),
            (self.ident_b, self.weights.identity),
        ];
        for (value, weight) in pairs {
            if weight != 0.0 {
                total += weight * value;
            }
        }
        for (entry, &weight) in self.attribute_losses.iter().zip(&self.weights.attribute) {
            if weight != 0.0 {
                total += weight * entry.value;
            }
        }
        total
    }
}

/// Assembles the weighted generator objective from its pieces.
pub fn total_generator_loss(
    gan_terms: &GanLossTerms,
    attr_terms: &[f64; ATTRIBUTE_COUNT],
    weights: &LossWeights,
    schema: &AttributeSchema,
) -> Result<LossBreakdown> {
    if weights.attribute.len() != ATTRIBUTE_COUNT {
        return Err(Error::Config("expected eight attribute weights".into()));
    }
    for &w in weights
        .attribute
        .iter()
        .chain([&weights.adversarial, &weights.cycle, &weights.identity])
    {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Config(format!("negative or non-finite weight {w}")));
        }
    }
    let all_terms = [
        gan_terms.adv_ab,
        gan_terms.adv_ba,
        gan_terms.cycle_a,
        gan_terms.cycle_b,
        gan_terms.ident_a,
        gan_terms.ident_b,
    ];
    if all_terms.iter().chain(attr_terms.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite loss term".into()));
    }
    let names = schema.attribute_names();
    let breakdown = LossBreakdown {
        adv_ab: gan_terms.adv_ab,
        adv_ba: gan_terms.adv_ba,
        cycle_a: gan_terms.cycle_a,
        cycle_b: gan_terms.cycle_b,
        ident_a: gan_terms.ident_a,
        ident_b: gan_terms.ident_b,
        attribute_losses: names
            .iter()
            .zip(attr_terms.iter())
            .map(|(n, &v)| NamedLoss { name: n.to_string(), value: v })
            .collect(),
        weights: weights.clone(),
        total: 0.0,
    };
    let total = breakdown.fold_total();
    Ok(LossBreakdown { total, ..breakdown })
}

/// Which translation directions feed the attribute critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceDirection {
    AToB,
    BToA,
    Both,
}

impl GuidanceDirection {
    pub fn uses_ab(self) -> bool {
        matches!(self, GuidanceDirection::AToB | GuidanceDirection::Both)
    }

    pub fn uses_ba(self) -> bool {
        matches!(self, GuidanceDirection::BToA | GuidanceDirection::Both)
    }
}

/// Attribute network in its role as a fixed critic. The flag is part of
/// the training contract: guided steps refuse an unfrozen critic.
pub struct FrozenAcan<F> {
    model: AcanModel<F>,
    frozen: bool,
}

impl<F: Scalar> FrozenAcan<F> {
    pub fn new(model: AcanModel<F>) -> Self {
        Self { model, frozen: true }
    }

    pub fn model(&self) -> &AcanModel<F> {
        &self.model
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Unfreezing is only meaningful for separate fine-tuning workflows;
    /// guided translation steps reject a thawed critic.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.model.param_bytes()
    }
}

/// Mutable training state for the translation pair.
pub struct GanTrainState<F: Scalar> {
    pub pair: GanPair<F>,
    pub opt_g: Adam<F>,
    pub opt_d: Adam<F>,
    pub pool_a: ImagePool<F>,
    pub pool_b: ImagePool<F>,
    pub steps_done: usize,
}

impl<F: Scalar> GanTrainState<F> {
    pub fn new(config: &GanConfig, seed: u64, lr: f64) -> Result<Self> {
        let pair = GanPair::init(config, seed)?;
        let mut g_shapes: Vec<Vec<usize>> = pair
            .g_ab
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        g_shapes.extend(pair.g_ba.named_params().iter().map(|(_, t)| t.shape().to_vec()));
        let mut d_shapes: Vec<Vec<usize>> = pair
            .d_a
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        d_shapes.extend(pair.d_b.named_params().iter().map(|(_, t)| t.shape().to_vec()));
        Ok(Self {
            pair,
            opt_g: Adam::new(AdamConfig::gan(lr), &g_shapes),
            opt_d: Adam::new(AdamConfig::gan(lr), &d_shapes),
            pool_a: ImagePool::new(config.pool_capacity, seed, StreamId::PoolA),
            pool_b: ImagePool::new(config.pool_capacity, seed, StreamId::PoolB),
            steps_done: 0,
        })
    }
}

struct GuidanceArgs<'a, F: Scalar> {
    acan: &'a FrozenAcan<F>,
    target: &'a AttributeTarget,
    direction: GuidanceDirection,
}

/// Plain translation step: generator update from adversarial + cycle +
/// identity terms, discriminator update from pooled fakes.
pub fn cyclegan_training_step<F: Scalar>(
    state: &mut GanTrainState<F>,
    batch_a: &ImageBatch<F>,
    batch_b: &ImageBatch<F>,
    weights: &GanLossWeights,
) -> Result<LossBreakdown> {
    step_impl(state, batch_a, batch_b, None, weights, &AttributeSchema::canonical())
}

/// Guided step: adds the eight attribute losses on translated images.
/// The critic must be frozen; its parameters are never updated here.
pub fn guided_training_step<F: Scalar>(
    state: &mut GanTrainState<F>,
    batch_a: &ImageBatch<F>,
    batch_b: &ImageBatch<F>,
    acan: &FrozenAcan<F>,
    target: &AttributeTarget,
    direction: GuidanceDirection,
    weights: &GanLossWeights,
) -> Result<LossBreakdown> {
    if !acan.frozen() {
        return Err(Error::Config(
            "guided training requires a frozen attribute network".into(),
        ));
    }
    let schema = acan.model().schema.clone();
    step_impl(
        state,
        batch_a,
        batch_b,
        Some(GuidanceArgs { acan, target, direction }),
        weights,
        &schema,
    )
}

fn validate_batch<F: Scalar>(state: &GanTrainState<F>, batch: &ImageBatch<F>) -> Result<()> {
    if batch.range() != PixelRange::Symmetric {
        return Err(Error::Input("training batches must be generator-space [-1,1]".into()));
    }
    let size = state.pair.config.image_size;
    if batch.height() != size || batch.width() != size {
        return Err(Error::Input(format!(
            "batch is {}x{}, configured size is {size}",
            batch.height(),
            batch.width()
        )));
    }
    Ok(())
}

fn step_impl<F: Scalar>(
    state: &mut GanTrainState<F>,
    batch_a: &ImageBatch<F>,
    batch_b: &ImageBatch<F>,
    guidance: Option<GuidanceArgs<'_, F>>,
    weights: &GanLossWeights,
    schema: &AttributeSchema,
) -> Result<LossBreakdown> {
    weights.validate()?;
    validate_batch(state, batch_a)?;
    validate_batch(state, batch_b)?;

    // Guidance with no weighted attribute is skipped entirely, which keeps
    // the step bitwise identical to the unguided loop.
    let guidance = guidance.filter(|g| g.target.any_weighted());
    let attr_weights: Vec<f64> = match &guidance {
        Some(g) => g.target.weights(),
        None => vec![0.0; ATTRIBUTE_COUNT],
    };

    // --- generator update ---------------------------------------------
    let mut tape = Tape::new();
    let g_ab = state.pair.g_ab.bind(&mut tape, true);
    let g_ba = state.pair.g_ba.bind(&mut tape, true);
    let d_a = state.pair.d_a.bind(&mut tape, false);
    let d_b = state.pair.d_b.bind(&mut tape, false);

    let a = tape.leaf(batch_a.tensor().clone());
    let b = tape.leaf(batch_b.tensor().clone());

    let fake_b = g_ab.forward(&mut tape, a);
    let fake_a = g_ba.forward(&mut tape, b);
    let rec_a = g_ba.forward(&mut tape, fake_b);
    let rec_b = g_ab.forward(&mut tape, fake_a);

    let d_b_on_fake = d_b.forward(&mut tape, fake_b);
    let adv_ab = adversarial_loss_var(&mut tape, d_b_on_fake, true);
    let d_a_on_fake = d_a.forward(&mut tape, fake_a);
    let adv_ba = adversarial_loss_var(&mut tape, d_a_on_fake, true);

    let cycle_a = mad_loss_var(&mut tape, rec_a, a);
    let cycle_b = mad_loss_var(&mut tape, rec_b, b);

    // Identity terms are only materialized when weighted; the extra
    // generator passes would otherwise change nothing but cost time.
    let ident = if weights.identity != 0.0 {
        let idt_a = g_ba.forward(&mut tape, a);
        let idt_b = g_ab.forward(&mut tape, b);
        Some((mad_loss_var(&mut tape, idt_a, a), mad_loss_var(&mut tape, idt_b, b)))
    } else {
        None
    };

    let w_adv = c::<F>(weights.adversarial);
    let w_cyc = c::<F>(weights.cycle);
    let w_idt = c::<F>(weights.identity);
    let mut terms: Vec<(Var, F)> = vec![
        (adv_ab, w_adv),
        (adv_ba, w_adv),
        (cycle_a, w_cyc),
        (cycle_b, w_cyc),
    ];
    if let Some((ia, ib)) = ident {
        terms.push((ia, w_idt));
        terms.push((ib, w_idt));
    }

    // Attribute terms: translated images cross the range bridge into the
    // frozen critic; per-attribute discrepancies join the objective.
    let mut attr_values = [0.0; ATTRIBUTE_COUNT];
    if let Some(g) = &guidance {
        let acan_vars = g.acan.model().bind(&mut tape, false);
        let mut dir_terms: Vec<Vec<Option<Var>>> = Vec::new();
        if g.direction.uses_ab() {
            let bridged = range_bridge_var(&mut tape, fake_b);
            let outputs = acan_vars.forward(&mut tape, bridged);
            dir_terms.push(attribute_loss_terms_on_tape(
                &mut tape,
                &outputs,
                g.target,
                batch_a.count(),
            ));
        }
        if g.direction.uses_ba() {
            let bridged = range_bridge_var(&mut tape, fake_a);
            let outputs = acan_vars.forward(&mut tape, bridged);
            dir_terms.push(attribute_loss_terms_on_tape(
                &mut tape,
                &outputs,
                g.target,
                batch_b.count(),
            ));
        }
        let share = c::<F>(1.0 / dir_terms.len() as f64);
        for idx in 0..ATTRIBUTE_COUNT {
            let per_dir: Vec<Var> = dir_terms.iter().filter_map(|d| d[idx]).collect();
            if per_dir.is_empty() {
                continue;
            }
            let combined_terms: Vec<(Var, F)> = per_dir.iter().map(|&v| (v, share)).collect();
            let combined = tape.weighted_sum(&combined_terms);
            attr_values[idx] = to_f64(tape.value(combined).item());
            let w = attr_weights[idx];
            if w > 0.0 {
                terms.push((combined, c(w)));
            }
        }
    }

    let total_g = tape.weighted_sum(&terms);
    let grads = tape.backward(total_g);

    let mut g_param_vars = g_ab.params.clone();
    g_param_vars.extend_from_slice(&g_ba.params);
    let grad_refs: Vec<Option<&Tensor<F>>> = g_param_vars.iter().map(|&v| grads.wrt(v)).collect();
    {
        let mut params = state.pair.g_ab.params_mut();
        params.extend(state.pair.g_ba.params_mut());
        state.opt_g.step(&mut params, &grad_refs);
    }

    let gan_terms = GanLossTerms {
        adv_ab: to_f64(tape.value(adv_ab).item()),
        adv_ba: to_f64(tape.value(adv_ba).item()),
        cycle_a: to_f64(tape.value(cycle_a).item()),
        cycle_b: to_f64(tape.value(cycle_b).item()),
        ident_a: ident.map(|(ia, _)| to_f64(tape.value(ia).item())).unwrap_or(0.0),
        ident_b: ident.map(|(_, ib)| to_f64(tape.value(ib).item())).unwrap_or(0.0),
    };
    let fake_a_detached = ImageBatch::new(tape.value(fake_a).clone(), PixelRange::Symmetric)?;
    let fake_b_detached = ImageBatch::new(tape.value(fake_b).clone(), PixelRange::Symmetric)?;
    drop(tape);

    // --- discriminator update ------------------------------------------
    let pooled_a = state.pool_a.query(&fake_a_detached);
    let pooled_b = state.pool_b.query(&fake_b_detached);

    let mut tape = Tape::new();
    let d_a = state.pair.d_a.bind(&mut tape, true);
    let d_b = state.pair.d_b.bind(&mut tape, true);
    let real_a = tape.leaf(batch_a.tensor().clone());
    let real_b = tape.leaf(batch_b.tensor().clone());
    let fake_a_leaf = tape.leaf(pooled_a.into_tensor());
    let fake_b_leaf = tape.leaf(pooled_b.into_tensor());

    let half = c::<F>(0.5);
    let d_a_real = d_a.forward(&mut tape, real_a);
    let d_a_real_term = adversarial_loss_var(&mut tape, d_a_real, true);
    let d_a_fake = d_a.forward(&mut tape, fake_a_leaf);
    let d_a_fake_term = adversarial_loss_var(&mut tape, d_a_fake, false);
    let d_b_real = d_b.forward(&mut tape, real_b);
    let d_b_real_term = adversarial_loss_var(&mut tape, d_b_real, true);
    let d_b_fake = d_b.forward(&mut tape, fake_b_leaf);
    let d_b_fake_term = adversarial_loss_var(&mut tape, d_b_fake, false);
    let total_d = tape.weighted_sum(&[
        (d_a_real_term, half),
        (d_a_fake_term, half),
        (d_b_real_term, half),
        (d_b_fake_term, half),
    ]);
    let grads = tape.backward(total_d);
    let mut d_param_vars = d_a.params.clone();
    d_param_vars.extend_from_slice(&d_b.params);
    let grad_refs: Vec<Option<&Tensor<F>>> = d_param_vars.iter().map(|&v| grads.wrt(v)).collect();
    {
        let mut params = state.pair.d_a.params_mut();
        params.extend(state.pair.d_b.params_mut());
        state.opt_d.step(&mut params, &grad_refs);
    }
    drop(tape);

    state.steps_done += 1;

    let weights = LossWeights {
        adversarial: weights.adversarial,
        cycle: weights.cycle,
        identity: weights.identity,
        attribute: attr_weights,
    };
    total_generator_loss(&gan_terms, &attr_values, &weights, schema)
}
