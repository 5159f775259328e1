//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Everything here is `f64`. Parameters can be viewed either structurally
//! (a [`DenseNetwork`] made of [`DenseLayer`]s) or as a flat [`ParamVector`]
//! whose [`ParamLayout`] records which parameter group each block belongs to.
//! Groups are what per-group learning-rate scaling in [`sgd_step`] keys on.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-probabilities below this value are clamped inside the loss.
pub const LOG_PROB_FLOOR: f64 = -50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LogSoftmax,
    Identity,
}

/// Identifier of a parameter group, e.g. `enc:mrna` or `classifier`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl GroupId {
    pub fn new(id: impl Into<String>) -> Self {
        GroupId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub group: GroupId,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// How a flat parameter vector maps onto shaped blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
}

impl ParamLayout {
    pub fn new(entries: Vec<LayoutEntry>) -> Self {
        ParamLayout { entries }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    /// Total number of scalars described by the layout.
    pub fn len(&self) -> usize {
        self.entries.iter().map(LayoutEntry::size).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct groups in order of first appearance.
    pub fn groups(&self) -> Vec<GroupId> {
        let mut out: Vec<GroupId> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn concat(parts: &[&ParamLayout]) -> ParamLayout {
        ParamLayout {
            entries: parts.iter().flat_map(|p| p.entries.iter().cloned()).collect(),
        }
    }
}

/// Flat parameter vector plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

/// Gradients share the layout of the parameters they differentiate.
pub type GradientVector = ParamVector;

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits the flat vector into its shaped blocks.
    pub fn segments(&self) -> Vec<(&LayoutEntry, &[f64])> {
        let mut offset = 0;
        self.layout
            .entries
            .iter()
            .map(|e| {
                let n = e.size();
                let s = &self.values[offset..offset + n];
                offset += n;
                (e, s)
            })
            .collect()
    }

    /// Inverse of [`segments`](Self::segments).
    pub fn from_segments(segments: &[(LayoutEntry, Vec<f64>)]) -> Result<Self> {
        let mut values = Vec::new();
        let mut entries = Vec::with_capacity(segments.len());
        for (e, v) in segments {
            if v.len() != e.size() {
                return Err(Error::Shape(format!(
                    "block of group {} has {} values, shape {:?} needs {}",
                    e.group,
                    v.len(),
                    e.shape,
                    e.size()
                )));
            }
            values.extend_from_slice(v);
            entries.push(e.clone());
        }
        Ok(ParamVector {
            values,
            layout: ParamLayout { entries },
        })
    }

    /// Sub-vector made of every block belonging to `group`, in order.
    pub fn select_group(&self, group: &GroupId) -> Option<ParamVector> {
        let mut values = Vec::new();
        let mut entries = Vec::new();
        for (e, s) in self.segments() {
            if &e.group == group {
                values.extend_from_slice(s);
                entries.push(e.clone());
            }
        }
        if entries.is_empty() {
            None
        } else {
            Some(ParamVector {
                values,
                layout: ParamLayout { entries },
            })
        }
    }

    pub fn concat(parts: &[&ParamVector]) -> ParamVector {
        let layouts: Vec<&ParamLayout> = parts.iter().map(|p| &p.layout).collect();
        ParamVector {
            values: parts.iter().flat_map(|p| p.values.iter().copied()).collect(),
            layout: ParamLayout::concat(&layouts),
        }
    }

    fn check_same_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape(format!("{what}: parameter layouts differ")));
        }
        Ok(())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(other, "difference")?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other, "inner product")?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    Encoder(String),
    Classifier,
}

/// A parameter group together with the learning-rate multiplier applied to it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub id: GroupId,
    pub role: GroupRole,
    pub lr_scale: f64,
}

/// One SGD step with per-group learning-rate scaling:
/// `out[i] = params[i] - eta * scale(group(i)) * grads[i]`.
pub fn sgd_step(
    params: &ParamVector,
    grads: &GradientVector,
    eta: f64,
    groups: &[ParamGroup],
) -> Result<ParamVector> {
    if params.layout != grads.layout {
        return Err(Error::Shape(
            "gradient layout does not match parameter layout".into(),
        ));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Validation(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    let mut scales: BTreeMap<&GroupId, f64> = BTreeMap::new();
    for g in groups {
        if !(g.lr_scale >= 0.0 && g.lr_scale.is_finite()) {
            return Err(Error::Validation(format!(
                "group {} has invalid lr_scale {}",
                g.id, g.lr_scale
            )));
        }
        if scales.insert(&g.id, g.lr_scale).is_some() {
            return Err(Error::Validation(format!("duplicate group {}", g.id)));
        }
    }
    let mut out = params.values.clone();
    let mut offset = 0;
    for e in &params.layout.entries {
        let scale = *scales.get(&e.group).ok_or_else(|| {
            Error::Shape(format!("parameters of group {} have no ParamGroup", e.group))
        })?;
        let n = e.size();
        let step = eta * scale;
        for (p, g) in out[offset..offset + n]
            .iter_mut()
            .zip(&grads.values[offset..offset + n])
        {
            *p -= step * g;
        }
        offset += n;
    }
    Ok(ParamVector {
        values: out,
        layout: params.layout.clone(),
    })
}

/// Central-difference gradient estimate of `loss` at `params`.
pub fn finite_diff_grad<F>(mut loss: F, params: &ParamVector, eps: f64) -> Result<GradientVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let up = loss(&probe)?;
        probe.values[i] = orig - eps;
        let down = loss(&probe)?;
        probe.values[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    ParamVector::new(grad, params.layout.clone())
}

/// `-logp[argmax y]` for a one-hot `y`, with log-probabilities clamped at
/// [`LOG_PROB_FLOOR`].
pub fn cross_entropy(logp: &[f64], y: &[f64]) -> Result<f64> {
    if logp.len() != y.len() {
        return Err(Error::Shape(format!(
            "log-probabilities have length {}, label has length {}",
            logp.len(),
            y.len()
        )));
    }
    Ok(nll(logp, one_hot_index(y)?))
}

/// Clamped negative log-likelihood of class `label`.
pub fn nll(logp: &[f64], label: usize) -> f64 {
    -logp[label].max(LOG_PROB_FLOOR)
}

pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

pub fn one_hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return Err(Error::Validation("label has more than one hot entry".into()));
            }
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Validation(format!(
                "label entry {i} is {v}, expected 0 or 1"
            )));
        }
    }
    hot.ok_or_else(|| Error::Validation("label has no hot entry".into()))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {in_dim}->{out_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(in_dim, out_dim, weights, vec![0.0; out_dim], activation)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            *zo += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        match self.activation {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
            Activation::LogSoftmax => log_softmax_in_place(&mut z),
        }
        z
    }
}

/// Per-layer inputs and outputs recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

impl DenseNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        let last = layers.len() - 1;
        if layers[..last]
            .iter()
            .any(|l| l.activation == Activation::LogSoftmax)
        {
            return Err(Error::Shape(
                "log_softmax may only be used on the final layer".into(),
            ));
        }
        Ok(DenseNetwork { layers })
    }

    /// Builds a Glorot-initialised network through the widths in `dims`
    /// (`dims[0]` is the input width).
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need an input and at least one layer width".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Output of the final layer; log-probabilities when it is `log_softmax`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in &self.layers {
            a = l.apply(&a);
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for l in &self.layers {
            let next = l.apply(activations.last().expect("non-empty"));
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the network output) through a
    /// recorded forward pass, adding parameter gradients scaled by `weight`
    /// into `grad` (flat layout, see [`flatten`](Self::flatten)). Returns the
    /// gradient w.r.t. the network input.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        d_out: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.param_count());
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut delta = d_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[i + 1];
            let input = &trace.activations[i];
            // delta: dL/d(output) -> dL/d(pre-activation)
            match l.activation {
                Activation::Identity => {}
                Activation::Relu => {
                    for (d, a) in delta.iter_mut().zip(out) {
                        if *a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::LogSoftmax => {
                    let total: f64 = delta.iter().sum();
                    for (d, lp) in delta.iter_mut().zip(out) {
                        *d -= lp.exp() * total;
                    }
                }
            }
            let base = offsets[i];
            let (gw, gb) = grad[base..base + l.param_count()].split_at_mut(l.weights.len());
            let mut d_in = vec![0.0; l.in_dim];
            for (o, &dz) in delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                let s = weight * dz;
                gb[o] += s;
                let row = &l.weights[o * l.in_dim..(o + 1) * l.in_dim];
                let grow = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                for j in 0..l.in_dim {
                    grow[j] += s * input[j];
                    d_in[j] += row[j] * dz;
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Batch-mean cross-entropy and its gradient. Each sample is an input and
    /// the class index of its one-hot label.
    pub fn backward(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        if self.layers[self.layers.len() - 1].activation != Activation::LogSoftmax {
            return Err(Error::Validation(
                "cross-entropy needs a log_softmax output layer".into(),
            ));
        }
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        for (x, label) in batch {
            if *label >= self.out_dim() {
                return Err(Error::Validation(format!(
                    "label {label} out of range for {} classes",
                    self.out_dim()
                )));
            }
            let trace = self.forward_trace(x)?;
            let logp = trace.output();
            loss += nll(logp, *label);
            self.backward_trace(&trace, &nll_grad(logp, *label), 1.0 / n, &mut grad);
        }
        Ok((loss / n, grad))
    }

    pub fn layout(&self, group: &GroupId) -> ParamLayout {
        let mut entries = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            entries.push(LayoutEntry {
                group: group.clone(),
                shape: vec![l.out_dim, l.in_dim],
            });
            entries.push(LayoutEntry {
                group: group.clone(),
                shape: vec![l.out_dim],
            });
        }
        ParamLayout::new(entries)
    }

    /// Flat values: per layer, row-major weights then bias.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn flatten(&self, group: &GroupId) -> ParamVector {
        ParamVector {
            values: self.flat_values(),
            layout: self.layout(group),
        }
    }

    /// Overwrites every parameter from a flat slice in [`flat_values`](Self::flat_values) order.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for a network of {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

/// Gradient of the clamped negative log-likelihood w.r.t. the log-probabilities.
pub fn nll_grad(logp: &[f64], label: usize) -> Vec<f64> {
    let mut g = vec![0.0; logp.len()];
    if logp[label] >= LOG_PROB_FLOOR {
        g[label] = -1.0;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn random_net(dims: &[usize], seed: u64) -> DenseNetwork {
        let mut r = rng::stream(seed, "net");
        DenseNetwork::init(dims, Activation::Relu, Activation::LogSoftmax, &mut r).unwrap()
    }

    fn random_vec(n: usize, r: &mut rng::Stream) -> Vec<f64> {
        (0..n).map(|_| rand::Rng::random_range(r, -1.0..1.0)).collect()
    }

    #[test]
    fn zero_layer_gives_uniform_log_probs() {
        let net =
            DenseNetwork::new(vec![DenseLayer::zeros(3, 2, Activation::LogSoftmax).unwrap()])
                .unwrap();
        let out = net.forward(&[0.3, -2.0, 7.0]).unwrap();
        for v in out {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_softmax_is_zero() {
        let layer = DenseLayer::new(1, 1, vec![1.0], vec![0.0], Activation::LogSoftmax).unwrap();
        let net = DenseNetwork::new(vec![layer]).unwrap();
        assert_eq!(net.forward(&[3.5]).unwrap(), vec![0.0]);
    }

    #[test]
    fn random_net_output_normalises() {
        let net = random_net(&[4, 3, 2], 11);
        let mut r = rng::stream(1, "x");
        for _ in 0..50 {
            let x = random_vec(4, &mut r);
            let s: f64 = net.forward(&x).unwrap().iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = random_net(&[4, 2], 1);
        assert!(matches!(net.forward(&[1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn log_softmax_only_last() {
        let a = DenseLayer::zeros(2, 2, Activation::LogSoftmax).unwrap();
        let b = DenseLayer::zeros(2, 2, Activation::Identity).unwrap();
        assert!(DenseNetwork::new(vec![a, b]).is_err());
        assert!(DenseLayer::new(2, 2, vec![0.0; 3], vec![0.0; 2], Activation::Relu).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let l2 = 2f64.ln();
        assert!((cross_entropy(&[-l2, -l2], &[1.0, 0.0]).unwrap() - l2).abs() < 1e-15);
        assert_eq!(cross_entropy(&[0.0, LOG_PROB_FLOOR], &[1.0, 0.0]).unwrap(), 0.0);
        let v = cross_entropy(&[-0.1054, -2.3026], &[0.0, 1.0]).unwrap();
        assert!((v - 2.3026).abs() < 1e-12);
        assert!(cross_entropy(&[-1.0, -1.0], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[-1.0, -1.0], &[1.0, 1.0]).is_err());
        assert!(cross_entropy(&[-1.0, -1.0], &[0.0, 0.0]).is_err());
        // clamp keeps the loss finite
        assert_eq!(cross_entropy(&[f64::NEG_INFINITY, 0.0], &[1.0, 0.0]).unwrap(), 50.0);
    }

    #[test]
    fn backward_empty_batch() {
        let net = random_net(&[2, 2], 1);
        assert!(matches!(net.backward(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let net = random_net(&[3, 4, 2], 5);
        let x = vec![0.2, -0.7, 1.1];
        let (l1, g1) = net.backward(&[(&x, 1)]).unwrap();
        let batch: Vec<(&[f64], usize)> = (0..4).map(|_| (x.as_slice(), 1)).collect();
        let (l4, g4) = net.backward(&batch).unwrap();
        assert!((l1 - l4).abs() < 1e-15);
        for (a, b) in g1.iter().zip(&g4) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn loss_at(net: &DenseNetwork, v: &ParamVector, batch: &[(&[f64], usize)]) -> Result<f64> {
        let mut n = net.clone();
        n.load_flat(v.values())?;
        Ok(n.backward(batch)?.0)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_net(&[3, 4, 2], 17);
        let mut r = rng::stream(3, "batch");
        let xs: Vec<Vec<f64>> = (0..5).map(|_| random_vec(3, &mut r)).collect();
        let batch: Vec<(&[f64], usize)> =
            xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 2)).collect();
        let (_, g) = net.backward(&batch).unwrap();
        let flat = net.flatten(&GroupId::from("g"));
        let fd = finite_diff_grad(|v| loss_at(&net, v, &batch), &flat, 1e-5).unwrap();
        for (a, b) in g.iter().zip(fd.values()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} vs numeric {b}");
        }
    }

    #[test]
    fn saturated_true_class_has_zero_bias_gradient() {
        // Final layer: zero weights, bias pushes class 0 far above class 1.
        let layer =
            DenseLayer::new(2, 2, vec![0.0; 4], vec![40.0, -40.0], Activation::LogSoftmax)
                .unwrap();
        let net = DenseNetwork::new(vec![layer]).unwrap();
        let x = [0.5, -0.5];
        assert_eq!(net.forward(&x).unwrap()[0], 0.0);
        let (_, g) = net.backward(&[(&x, 0)]).unwrap();
        // bias block follows the 4 weights
        assert_eq!(g[4], 0.0);
        // other class: p - y = p_1, tiny and positive
        assert!(g[5] > 0.0 && g[5] < 1e-30);
    }

    #[test]
    fn sgd_step_cases() {
        let layout = ParamLayout::new(vec![
            LayoutEntry { group: "a".into(), shape: vec![1] },
            LayoutEntry { group: "b".into(), shape: vec![1] },
        ]);
        let p = ParamVector::new(vec![1.0, 1.0], layout.clone()).unwrap();
        let g = ParamVector::new(vec![2.0, 2.0], layout.clone()).unwrap();
        let groups = |a: f64, b: f64| {
            vec![
                ParamGroup { id: "a".into(), role: GroupRole::Encoder("m".into()), lr_scale: a },
                ParamGroup { id: "b".into(), role: GroupRole::Classifier, lr_scale: b },
            ]
        };
        let out = sgd_step(&p, &g, 0.1, &groups(0.5, 2.0)).unwrap();
        assert!((out.values()[0] - 0.9).abs() < 1e-15);
        assert!((out.values()[1] - 0.6).abs() < 1e-15);

        let plain = sgd_step(&p, &g, 0.1, &groups(1.0, 1.0)).unwrap();
        assert_eq!(plain.values(), &[1.0 - 0.1 * 2.0, 1.0 - 0.1 * 2.0]);

        let frozen = sgd_step(&p, &g, 0.1, &groups(0.0, 1.0)).unwrap();
        assert_eq!(frozen.values()[0], 1.0);

        let other = ParamVector::new(vec![0.0], ParamLayout::new(vec![LayoutEntry {
            group: "a".into(),
            shape: vec![1],
        }]))
        .unwrap();
        assert!(matches!(sgd_step(&p, &other, 0.1, &groups(1.0, 1.0)), Err(Error::Shape(_))));
        assert!(sgd_step(&p, &g, 0.0, &groups(1.0, 1.0)).is_err());
        assert!(sgd_step(&p, &g, 0.1, &groups(1.0, 1.0)[..1]).is_err());
    }

    #[test]
    fn finite_diff_simple_functions() {
        let layout = ParamLayout::new(vec![LayoutEntry { group: "g".into(), shape: vec![2] }]);
        let v = ParamVector::new(vec![1.0, 2.0], layout).unwrap();
        let g = finite_diff_grad(|p| Ok(p.values().iter().map(|x| x * x).sum()), &v, 1e-5)
            .unwrap();
        assert!((g.values()[0] - 2.0).abs() < 1e-8);
        assert!((g.values()[1] - 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| Ok(3.0), &v, 1e-5).unwrap();
        assert_eq!(z.values(), &[0.0, 0.0]);
        assert!(finite_diff_grad(|_| Ok(0.0), &v, 0.0).is_err());
    }

    #[test]
    fn select_group_and_concat() {
        let net = random_net(&[3, 2], 2);
        let a = net.flatten(&"a".into());
        let b = net.flatten(&"b".into());
        let both = ParamVector::concat(&[&a, &b]);
        assert_eq!(both.select_group(&"b".into()).unwrap(), b);
        assert!(both.select_group(&"c".into()).is_none());
        assert_eq!(both.layout().groups(), vec![GroupId::from("a"), GroupId::from("b")]);
    }

    proptest! {
        #[test]
        fn segments_round_trip(sizes in prop::collection::vec((1usize..4, 1usize..4), 1..5), seed in any::<u64>()) {
            let entries: Vec<LayoutEntry> = sizes.iter().enumerate()
                .map(|(i, (r, c))| LayoutEntry { group: GroupId(format!("g{}", i % 2)), shape: vec![*r, *c] })
                .collect();
            let layout = ParamLayout::new(entries);
            let mut r = rng::stream(seed, "v");
            let v = ParamVector::new(random_vec(layout.len(), &mut r), layout).unwrap();
            let segs: Vec<(LayoutEntry, Vec<f64>)> =
                v.segments().into_iter().map(|(e, s)| (e.clone(), s.to_vec())).collect();
            prop_assert_eq!(ParamVector::from_segments(&segs).unwrap(), v);
        }

        #[test]
        fn sgd_step_is_linear_in_eta(a in 1e-3f64..1.0, b in 1e-3f64..1.0, seed in any::<u64>()) {
            let net = random_net(&[3, 2], seed);
            let p = net.flatten(&"g".into());
            let mut r = rng::stream(seed, "grad");
            let g = ParamVector::new(random_vec(p.len(), &mut r), p.layout().clone()).unwrap();
            let groups = [ParamGroup { id: "g".into(), role: GroupRole::Classifier, lr_scale: 0.7 }];
            let da = p.sub(&sgd_step(&p, &g, a, &groups).unwrap()).unwrap();
            let db = p.sub(&sgd_step(&p, &g, b, &groups).unwrap()).unwrap();
            let dab = p.sub(&sgd_step(&p, &g, a + b, &groups).unwrap()).unwrap();
            for i in 0..p.len() {
                prop_assert!((da.values()[i] + db.values()[i] - dab.values()[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn batch_gradient_is_mean_of_sample_gradients(seed in any::<u64>(), n in 1usize..6) {
            let net = random_net(&[3, 4, 3], seed);
            let mut r = rng::stream(seed, "xs");
            let xs: Vec<Vec<f64>> = (0..n).map(|_| random_vec(3, &mut r)).collect();
            let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i % 3)).collect();
            let (_, g) = net.backward(&batch).unwrap();
            let mut mean = vec![0.0; g.len()];
            for s in &batch {
                let (_, gi) = net.backward(std::slice::from_ref(s)).unwrap();
                for (m, v) in mean.iter_mut().zip(gi) { *m += v / n as f64; }
            }
            for (a, b) in g.iter().zip(&mean) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
