//! Multi-modal encoder/classifier networks.
//!
//! An institution holding modalities `C` runs one encoder per modality in `C`,
//! concatenates the encoder outputs in sorted modality order and feeds the
//! result to a single classifier. The sorted order is global, so classifiers
//! of institutions with the same combination are aggregation-compatible.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    nll, nll_grad, Activation, DenseNetwork, GroupId, GroupRole, ParamGroup, ParamLayout,
    ParamVector,
};
use crate::rng;

/// Separator used in canonical combination keys.
pub const KEY_SEPARATOR: char = '+';

pub const CLASSIFIER_GROUP: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(String);

impl ModalityId {
    pub fn new(name: impl Into<String>) -> Self {
        ModalityId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Parameter group holding this modality's encoder.
    pub fn encoder_group(&self) -> GroupId {
        GroupId(format!("enc:{}", self.0))
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModalityId {
    fn from(s: &str) -> Self {
        ModalityId(s.to_string())
    }
}

pub fn classifier_group() -> GroupId {
    GroupId::new(CLASSIFIER_GROUP)
}

pub type FeatureMap = BTreeMap<ModalityId, Vec<f64>>;

/// Canonical, order-insensitive key of a modality set.
pub fn combo_key<'a, I>(modalities: I) -> Result<String>
where
    I: IntoIterator<Item = &'a ModalityId>,
{
    Ok(ModalityCombination::new(modalities.into_iter().cloned())?.key())
}

/// Non-empty, sorted, deduplicated set of modalities.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModalityId>", into = "Vec<ModalityId>")]
pub struct ModalityCombination(Vec<ModalityId>);

impl ModalityCombination {
    pub fn new<I: IntoIterator<Item = ModalityId>>(modalities: I) -> Result<Self> {
        let mut v: Vec<ModalityId> = modalities.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Validation("modality combination is empty".into()));
        }
        if let Some(bad) = v
            .iter()
            .find(|m| m.0.is_empty() || m.0.contains(KEY_SEPARATOR))
        {
            return Err(Error::Validation(format!("invalid modality name {:?}", bad.0)));
        }
        Ok(ModalityCombination(v))
    }

    pub fn from_names(names: &[&str]) -> Result<Self> {
        Self::new(names.iter().map(|n| ModalityId::from(*n)))
    }

    pub fn from_key(key: &str) -> Result<Self> {
        Self::new(key.split(KEY_SEPARATOR).map(ModalityId::from))
    }

    pub fn modalities(&self) -> &[ModalityId] {
        &self.0
    }

    pub fn key(&self) -> String {
        let names: Vec<&str> = self.0.iter().map(ModalityId::as_str).collect();
        names.join(&KEY_SEPARATOR.to_string())
    }

    pub fn contains(&self, m: &ModalityId) -> bool {
        self.0.binary_search(m).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_subset_of(&self, universe: &[ModalityId]) -> bool {
        self.0.iter().all(|m| universe.contains(m))
    }
}

impl TryFrom<Vec<ModalityId>> for ModalityCombination {
    type Error = Error;

    fn try_from(v: Vec<ModalityId>) -> Result<Self> {
        ModalityCombination::new(v)
    }
}

impl From<ModalityCombination> for Vec<ModalityId> {
    fn from(c: ModalityCombination) -> Self {
        c.0
    }
}

impl fmt::Display for ModalityCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_dim: usize,
    /// Hidden and output widths; every layer uses ReLU. The last entry is the
    /// encoder output width.
    pub widths: Vec<usize>,
}

impl EncoderSpec {
    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

/// Named depth presets for the mRNA encoder, widths listed at full scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MrnaDepth {
    Small,
    Medium,
    Large,
}

impl MrnaDepth {
    pub const FULL_INPUT: usize = 20531;

    pub fn full_widths(self) -> &'static [usize] {
        match self {
            MrnaDepth::Small => &[4096, 2048, 512, 128, 64, 32],
            MrnaDepth::Medium => &[8192, 4096, 2048, 512, 128, 64, 32],
            MrnaDepth::Large => &[16384, 8192, 4096, 2048, 512, 128, 64, 32],
        }
    }

    /// Widths divided by `divisor`, never below `min_width`.
    pub fn reduced_widths(self, divisor: usize, min_width: usize) -> Vec<usize> {
        let d = divisor.max(1);
        self.full_widths()
            .iter()
            .map(|w| (w / d).max(min_width))
            .collect()
    }
}

/// Encoder architecture per modality and the classifier's hidden widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchRegistry {
    pub encoders: BTreeMap<ModalityId, EncoderSpec>,
    pub classifier_hidden: Vec<usize>,
}

impl ArchRegistry {
    /// Desk-scale default: mrna 64 -> [32, 16], image 150 -> [64, 16],
    /// clinical 16 -> [16, 8]; classifier fused -> 32 -> classes.
    pub fn desk() -> Self {
        let mut encoders = BTreeMap::new();
        encoders.insert(ModalityId::from("mrna"), EncoderSpec { in_dim: 64, widths: vec![32, 16] });
        encoders.insert(ModalityId::from("image"), EncoderSpec { in_dim: 150, widths: vec![64, 16] });
        encoders.insert(ModalityId::from("clinical"), EncoderSpec { in_dim: 16, widths: vec![16, 8] });
        ArchRegistry {
            encoders,
            classifier_hidden: vec![32],
        }
    }

    /// Desk registry with the mRNA encoder replaced by a reduced-width depth preset.
    pub fn with_mrna_depth(mut self, depth: MrnaDepth, mrna_in_dim: usize, divisor: usize) -> Self {
        self.encoders.insert(
            ModalityId::from("mrna"),
            EncoderSpec {
                in_dim: mrna_in_dim,
                widths: depth.reduced_widths(divisor, 4),
            },
        );
        self
    }

    pub fn validate(&self, universe: &[ModalityId]) -> Result<()> {
        for m in universe {
            let spec = self
                .encoders
                .get(m)
                .ok_or_else(|| Error::Config(format!("no encoder spec for modality {m}")))?;
            if spec.in_dim == 0 || spec.widths.is_empty() || spec.widths.contains(&0) {
                return Err(Error::Config(format!("encoder spec for {m} has a zero or empty width")));
            }
        }
        if self.classifier_hidden.contains(&0) {
            return Err(Error::Config("classifier hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder(&self, m: &ModalityId) -> Result<&EncoderSpec> {
        self.encoders
            .get(m)
            .ok_or_else(|| Error::Config(format!("unknown modality {m}")))
    }

    /// Sum of encoder output widths over a combination.
    pub fn fused_dim(&self, combo: &ModalityCombination) -> Result<usize> {
        combo
            .modalities()
            .iter()
            .map(|m| self.encoder(m).map(EncoderSpec::out_dim))
            .sum()
    }

    pub fn classifier_dims(&self, combo: &ModalityCombination, num_classes: usize) -> Result<Vec<usize>> {
        let mut dims = vec![self.fused_dim(combo)?];
        dims.extend_from_slice(&self.classifier_hidden);
        dims.push(num_classes);
        Ok(dims)
    }
}

/// Per-modality encoders plus one fused classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalNet {
    combination: ModalityCombination,
    encoders: BTreeMap<ModalityId, DenseNetwork>,
    classifier: DenseNetwork,
    num_classes: usize,
}

/// Builds a network for `combo`. Each encoder is initialised from a stream
/// keyed by `(seed, modality)` and the classifier from `(seed, combo key)`, so
/// the same modality gets the same initial encoder in every combination.
pub fn build_network(
    combo: &ModalityCombination,
    registry: &ArchRegistry,
    num_classes: usize,
    seed: u64,
) -> Result<MultiModalNet> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let mut encoders = BTreeMap::new();
    for m in combo.modalities() {
        let spec = registry.encoder(m)?;
        let mut dims = vec![spec.in_dim];
        dims.extend_from_slice(&spec.widths);
        let mut r = rng::stream(seed, &format!("init:enc:{m}"));
        let net = DenseNetwork::init(&dims, Activation::Relu, Activation::Relu, &mut r)
            .map_err(|e| Error::Config(format!("encoder {m}: {e}")))?;
        encoders.insert(m.clone(), net);
    }
    let dims = registry.classifier_dims(combo, num_classes)?;
    let mut r = rng::stream(seed, &format!("init:clf:{}", combo.key()));
    let classifier = DenseNetwork::init(&dims, Activation::Relu, Activation::LogSoftmax, &mut r)
        .map_err(|e| Error::Config(format!("classifier: {e}")))?;
    MultiModalNet::new(combo.clone(), encoders, classifier, num_classes)
}

/// Per-sample traces needed to backpropagate through a fused network.
struct FusedTrace {
    encoders: Vec<crate::nn::Trace>,
    classifier: crate::nn::Trace,
}

impl MultiModalNet {
    pub fn new(
        combination: ModalityCombination,
        encoders: BTreeMap<ModalityId, DenseNetwork>,
        classifier: DenseNetwork,
        num_classes: usize,
    ) -> Result<Self> {
        let keys: Vec<&ModalityId> = encoders.keys().collect();
        let expected: Vec<&ModalityId> = combination.modalities().iter().collect();
        if keys != expected {
            return Err(Error::Shape(format!(
                "encoders {keys:?} do not match combination {combination}"
            )));
        }
        let fused: usize = encoders.values().map(DenseNetwork::out_dim).sum();
        if classifier.in_dim() != fused {
            return Err(Error::Shape(format!(
                "classifier expects {} inputs, encoders produce {fused}",
                classifier.in_dim()
            )));
        }
        if classifier.out_dim() != num_classes {
            return Err(Error::Shape(format!(
                "classifier outputs {} classes, expected {num_classes}",
                classifier.out_dim()
            )));
        }
        Ok(MultiModalNet {
            combination,
            encoders,
            classifier,
            num_classes,
        })
    }

    pub fn combination(&self) -> &ModalityCombination {
        &self.combination
    }

    pub fn encoders(&self) -> &BTreeMap<ModalityId, DenseNetwork> {
        &self.encoders
    }

    pub fn classifier(&self) -> &DenseNetwork {
        &self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.encoders.values().map(DenseNetwork::param_count).sum::<usize>()
            + self.classifier.param_count()
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.len() != self.encoders.len()
            || !features.keys().zip(self.encoders.keys()).all(|(a, b)| a == b)
        {
            let got: Vec<&str> = features.keys().map(ModalityId::as_str).collect();
            return Err(Error::Input(format!(
                "features for [{}] given to a network over {}",
                got.join(", "),
                self.combination
            )));
        }
        Ok(())
    }

    /// Log-probabilities for one datapoint.
    pub fn predict(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let mut fused = Vec::with_capacity(self.classifier.in_dim());
        for (m, enc) in &self.encoders {
            fused.extend(enc.forward(&features[m])?);
        }
        self.classifier.forward(&fused)
    }

    fn forward_trace(&self, features: &FeatureMap) -> Result<FusedTrace> {
        self.check_features(features)?;
        let mut encoders = Vec::with_capacity(self.encoders.len());
        let mut fused = Vec::with_capacity(self.classifier.in_dim());
        for (m, enc) in &self.encoders {
            let t = enc.forward_trace(&features[m])?;
            fused.extend_from_slice(t.output());
            encoders.push(t);
        }
        let classifier = self.classifier.forward_trace(&fused)?;
        Ok(FusedTrace { encoders, classifier })
    }

    /// Batch-mean cross-entropy and its gradient in [`flatten`](Self::flatten) layout.
    pub fn backward(&self, batch: &[(&FeatureMap, usize)]) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let n = batch.len() as f64;
        let enc_sizes: Vec<usize> = self.encoders.values().map(DenseNetwork::param_count).collect();
        let enc_total: usize = enc_sizes.iter().sum();
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (features, label) in batch {
            if *label >= self.num_classes {
                return Err(Error::Validation(format!(
                    "label {label} out of range for {} classes",
                    self.num_classes
                )));
            }
            let trace = self.forward_trace(features)?;
            let logp = trace.classifier.output();
            loss += nll(logp, *label);
            let d_fused = self.classifier.backward_trace(
                &trace.classifier,
                &nll_grad(logp, *label),
                1.0 / n,
                &mut grad[enc_total..],
            );
            let mut g_off = 0;
            let mut f_off = 0;
            for ((enc, t), size) in self.encoders.values().zip(&trace.encoders).zip(&enc_sizes) {
                let w = enc.out_dim();
                enc.backward_trace(t, &d_fused[f_off..f_off + w], 1.0 / n, &mut grad[g_off..g_off + size]);
                g_off += size;
                f_off += w;
            }
        }
        Ok((loss / n, ParamVector::new(grad, self.layout())?))
    }

    /// Mean cross-entropy over a set of samples.
    pub fn mean_loss(&self, samples: &[(&FeatureMap, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Validation("no samples to evaluate".into()));
        }
        let mut total = 0.0;
        for (f, label) in samples {
            total += nll(&self.predict(f)?, *label);
        }
        Ok(total / samples.len() as f64)
    }

    pub fn layout(&self) -> ParamLayout {
        let mut parts: Vec<ParamLayout> = self
            .encoders
            .iter()
            .map(|(m, e)| e.layout(&m.encoder_group()))
            .collect();
        parts.push(self.classifier.layout(&classifier_group()));
        let refs: Vec<&ParamLayout> = parts.iter().collect();
        ParamLayout::concat(&refs)
    }

    /// Encoders in canonical modality order, then the classifier.
    pub fn flatten(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for e in self.encoders.values() {
            values.extend(e.flat_values());
        }
        values.extend(self.classifier.flat_values());
        ParamVector::new(values, self.layout()).expect("layout built from the same network")
    }

    /// Loads parameters from `v`, which must carry this network's layout.
    pub fn load(&mut self, v: &ParamVector) -> Result<()> {
        if v.layout() != &self.layout() {
            return Err(Error::Shape(format!(
                "parameter layout does not fit a network over {}",
                self.combination
            )));
        }
        let mut off = 0;
        for e in self.encoders.values_mut() {
            let n = e.param_count();
            e.load_flat(&v.values()[off..off + n])?;
            off += n;
        }
        self.classifier.load_flat(&v.values()[off..])
    }

    /// One learning-rate group per encoder plus the classifier group. `scale`
    /// supplies each group's multiplier.
    pub fn param_groups(&self, mut scale: impl FnMut(&GroupId) -> f64) -> Vec<ParamGroup> {
        let mut groups: Vec<ParamGroup> = self
            .encoders
            .keys()
            .map(|m| {
                let id = m.encoder_group();
                ParamGroup {
                    lr_scale: scale(&id),
                    id,
                    role: GroupRole::Encoder(m.as_str().to_string()),
                }
            })
            .collect();
        let id = classifier_group();
        groups.push(ParamGroup {
            lr_scale: scale(&id),
            id,
            role: GroupRole::Classifier,
        });
        groups
    }
}

/// Rebuilds a network with `template`'s architecture from flat parameters.
pub fn unflatten(v: &ParamVector, template: &MultiModalNet) -> Result<MultiModalNet> {
    let mut net = template.clone();
    net.load(v)?;
    Ok(net)
}
