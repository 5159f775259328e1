//! The federated engine: Γ-scaled local training on clients, per-modality
//! encoder and per-combination classifier aggregation on the server, DOGR
//! coefficients and proximity-aware client weights.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_minibatch, GlobalDataset, InstitutionDataset};
use crate::error::{Error, Result};
use crate::harness::{self, ModelSnapshot, RunResult};
use crate::model::{build_network, classifier_group, ArchRegistry, FeatureMap, ModalityCombination, ModalityId, MultiModalNet};
use crate::nn::{sgd_step, GroupId, ParamVector};
use crate::rng::{self, Stream};

/// Added to the squared overfitting change so DOGR stays finite when
/// overfitting does not move between rounds.
pub const DOGR_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodMode {
    #[serde(rename = "cm-fl")]
    CmFl,
    #[serde(rename = "cm-fl-dgb")]
    CmFlDgb,
    #[serde(rename = "dgb-pcw")]
    DgbPcw,
    #[serde(rename = "um-fl")]
    UmFl,
}

impl MethodMode {
    pub const ALL: [MethodMode; 4] = [MethodMode::CmFl, MethodMode::CmFlDgb, MethodMode::DgbPcw, MethodMode::UmFl];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodMode::CmFl => "cm-fl",
            MethodMode::CmFlDgb => "cm-fl-dgb",
            MethodMode::DgbPcw => "dgb-pcw",
            MethodMode::UmFl => "um-fl",
        }
    }

    pub fn uses_dgb(self) -> bool {
        matches!(self, MethodMode::CmFlDgb | MethodMode::DgbPcw)
    }

    pub fn uses_pcw(self) -> bool {
        self == MethodMode::DgbPcw
    }
}

impl fmt::Display for MethodMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        MethodMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected cm-fl, cm-fl-dgb, dgb-pcw or um-fl)")))
    }
}

/// Exponentially decaying learning rate, constant within a round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    pub fn rate(&self, round: usize) -> f64 {
        self.eta0 * self.decay.powi(round as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub mode: MethodMode,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub temperature: f64,
    /// Zero the DOGR ratio of groups whose validation loss rose. Off by default.
    pub signed_dogr: bool,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::Config("local_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be finite".into()));
        }
        self.schedule.validate()
    }
}

/// Group learning-rate multipliers before any DOGR history exists.
pub fn initial_gamma(combo: &ModalityCombination) -> BTreeMap<GroupId, f64> {
    combo
        .modalities()
        .iter()
        .map(|m| (m.encoder_group(), 1.0))
        .chain(std::iter::once((classifier_group(), 1.0)))
        .collect()
}

pub struct ClientState {
    pub institution_id: usize,
    pub dataset: InstitutionDataset,
    pub net: MultiModalNet,
    pub gamma: BTreeMap<GroupId, f64>,
    pub rng: Stream,
}

impl ClientState {
    pub fn new(dataset: InstitutionDataset, net: MultiModalNet, master_seed: u64) -> Result<Self> {
        if net.combination() != &dataset.combination {
            return Err(Error::Shape(format!(
                "institution {} holds {} but its network covers {}",
                dataset.institution_id,
                dataset.combination,
                net.combination()
            )));
        }
        Ok(ClientState {
            institution_id: dataset.institution_id,
            gamma: initial_gamma(&dataset.combination),
            rng: rng::client_stream(master_seed, dataset.institution_id),
            dataset,
            net,
        })
    }

    pub fn set_gamma(&mut self, gamma: BTreeMap<GroupId, f64>) -> Result<()> {
        let mut want: Vec<GroupId> = self.net.layout().groups();
        want.sort();
        let have: Vec<GroupId> = gamma.keys().cloned().collect();
        if want != have {
            return Err(Error::State(format!(
                "institution {}: gamma keys {have:?} do not match groups {want:?}",
                self.institution_id
            )));
        }
        if let Some((g, v)) = gamma.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::State(format!("institution {}: gamma[{g}] = {v}", self.institution_id)));
        }
        self.gamma = gamma;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub institution_id: usize,
    pub combo_key: String,
    pub start_params: ParamVector,
    pub end_params: ParamVector,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Train plus validation points.
    pub dataset_size: usize,
}

/// `steps` Γ-scaled SGD steps from the client's current parameters, then
/// full-set train and validation losses at the end state.
pub fn local_train(client: &mut ClientState, eta: f64, steps: usize, batch_size: usize) -> Result<RoundReport> {
    if steps == 0 {
        return Err(Error::Validation("local training needs at least one step".into()));
    }
    let start = client.net.flatten();
    let gamma = &client.gamma;
    let groups = client.net.param_groups(|g| gamma.get(g).copied().unwrap_or(f64::NAN));
    let mut params = start.clone();
    for _ in 0..steps {
        let batch = sample_minibatch(&client.dataset, batch_size, &mut client.rng)?;
        let samples: Vec<(&FeatureMap, usize)> = batch.iter().map(|p| (&p.features, p.label)).collect();
        let (_, grad) = client.net.backward(&samples)?;
        params = sgd_step(&params, &grad, eta, &groups)?;
        client.net.load(&params)?;
    }
    Ok(RoundReport {
        institution_id: client.institution_id,
        combo_key: client.dataset.combination.key(),
        start_params: start,
        train_loss: client.net.mean_loss(&client.dataset.train_samples())?,
        val_loss: client.net.mean_loss(&client.dataset.val_samples())?,
        end_params: params,
        dataset_size: client.dataset.size(),
    })
}

/// `Σ w_i v_i / Σ w_i`, accumulated with pre-normalised weights so a single
/// contributor is reproduced exactly.
pub fn weighted_mean(items: &[(f64, &ParamVector)]) -> Result<ParamVector> {
    let total: f64 = items.iter().map(|(w, _)| w).sum();
    if items.is_empty() || !(total > 0.0) {
        return Err(Error::Aggregation("weighted mean over no positive weight".into()));
    }
    let (w0, first) = items[0];
    let mut acc = first.clone();
    let a0 = w0 / total;
    acc.values_mut().iter_mut().for_each(|v| *v *= a0);
    for (w, v) in &items[1..] {
        if v.layout() != acc.layout() {
            return Err(Error::Shape("cannot average parameters with different layouts".into()));
        }
        let a = w / total;
        for (x, y) in acc.values_mut().iter_mut().zip(v.values()) {
            *x += a * y;
        }
    }
    Ok(acc)
}

/// Per-modality encoder averages weighted by dataset size over the
/// institutions holding that modality. Every modality of `universe` needs a holder.
pub fn aggregate_encoders(
    reports: &[RoundReport],
    universe: &[ModalityId],
) -> Result<BTreeMap<ModalityId, ParamVector>> {
    if reports.is_empty() {
        return Err(Error::Aggregation("no reports to aggregate".into()));
    }
    let mut out = BTreeMap::new();
    for m in universe {
        let group = m.encoder_group();
        let parts: Vec<(f64, ParamVector)> = reports
            .iter()
            .filter_map(|r| r.end_params.select_group(&group).map(|p| (r.dataset_size as f64, p)))
            .collect();
        if parts.is_empty() {
            return Err(Error::Aggregation(format!("no institution holds modality {m}")));
        }
        let refs: Vec<(f64, &ParamVector)> = parts.iter().map(|(w, p)| (*w, p)).collect();
        out.insert(m.clone(), weighted_mean(&refs)?);
    }
    Ok(out)
}

/// Classifier averages per exact modality combination.
pub fn aggregate_classifiers(reports: &[RoundReport]) -> Result<BTreeMap<String, ParamVector>> {
    if reports.is_empty() {
        return Err(Error::Aggregation("no reports to aggregate".into()));
    }
    let group = classifier_group();
    let mut by_combo: BTreeMap<&str, Vec<(f64, ParamVector)>> = BTreeMap::new();
    for r in reports {
        let clf = r
            .end_params
            .select_group(&group)
            .ok_or_else(|| Error::Aggregation(format!("institution {} reported no classifier", r.institution_id)))?;
        by_combo.entry(&r.combo_key).or_default().push((r.dataset_size as f64, clf));
    }
    by_combo
        .into_iter()
        .map(|(k, parts)| {
            let refs: Vec<(f64, &ParamVector)> = parts.iter().map(|(w, p)| (*w, p)).collect();
            Ok((k.to_string(), weighted_mean(&refs)?))
        })
        .collect()
}

/// Net local displacement over the round, start minus end.
pub fn cumulative_gradient(report: &RoundReport) -> Result<ParamVector> {
    report.start_params.sub(&report.end_params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OgPoint {
    pub overfitting: f64,
    pub generalization: f64,
}

/// Overfitting (validation minus train loss) and generalization (validation loss).
pub fn overfitting_generalization(train_loss: f64, val_loss: f64) -> OgPoint {
    OgPoint {
        overfitting: val_loss - train_loss,
        generalization: val_loss,
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub encoders: BTreeMap<ModalityId, ParamVector>,
    pub classifiers: BTreeMap<String, ParamVector>,
    /// Last two (O, G) points per combination key, oldest first.
    pub og_history: BTreeMap<String, VecDeque<OgPoint>>,
    pub pcw: PcwWeights,
    pub round: usize,
    pub temperature: f64,
}

impl ServerState {
    /// Initial global parameters for every combination in `combos`.
    pub fn init(
        combos: &[ModalityCombination],
        registry: &ArchRegistry,
        num_classes: usize,
        seed: u64,
        temperature: f64,
    ) -> Result<Self> {
        let mut encoders = BTreeMap::new();
        let mut classifiers = BTreeMap::new();
        for c in combos {
            let p = build_network(c, registry, num_classes, seed)?.flatten();
            for m in c.modalities() {
                let g = p.select_group(&m.encoder_group()).expect("encoder present");
                encoders.entry(m.clone()).or_insert(g);
            }
            classifiers
                .entry(c.key())
                .or_insert_with(|| p.select_group(&classifier_group()).expect("classifier present"));
        }
        Ok(ServerState {
            encoders,
            classifiers,
            og_history: BTreeMap::new(),
            pcw: PcwWeights::default(),
            round: 0,
            temperature,
        })
    }

    /// `[encoders of combo in canonical order : classifier of combo]`.
    pub fn params_for(&self, combo: &ModalityCombination) -> Result<ParamVector> {
        let mut parts = Vec::with_capacity(combo.len() + 1);
        for m in combo.modalities() {
            parts.push(
                self.encoders
                    .get(m)
                    .ok_or_else(|| Error::State(format!("no global encoder for {m}")))?,
            );
        }
        let key = combo.key();
        parts.push(
            self.classifiers
                .get(&key)
                .ok_or_else(|| Error::State(format!("no global classifier for {key}")))?,
        );
        Ok(ParamVector::concat(&parts))
    }

    pub fn network(&self, combo: &ModalityCombination, registry: &ArchRegistry, num_classes: usize) -> Result<MultiModalNet> {
        let mut net = build_network(combo, registry, num_classes, 0)?;
        net.load(&self.params_for(combo)?)?;
        Ok(net)
    }

    pub fn push_og(&mut self, key: &str, point: OgPoint) {
        let h = self.og_history.entry(key.to_string()).or_default();
        h.push_back(point);
        while h.len() > 2 {
            h.pop_front();
        }
    }
}

/// Old-minus-new global parameters of `combo`.
pub fn global_trajectory(prev: &ServerState, next: &ServerState, combo: &ModalityCombination) -> Result<ParamVector> {
    prev.params_for(combo)?.sub(&next.params_for(combo)?)
}

/// Raw similarities and their per-combination softmax weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PcwWeights {
    pub similarity: BTreeMap<String, BTreeMap<usize, f64>>,
    pub weights: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl PcwWeights {
    pub fn weight(&self, combo_key: &str, institution_id: usize) -> Option<f64> {
        self.weights.get(combo_key)?.get(&institution_id).copied()
    }
}

/// `exp(τ s_i) / Σ exp(τ s_j)` with the maximum subtracted first.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let scaled: Vec<f64> = scores.iter().map(|s| temperature * s).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Inner products of each institution's cumulative gradient with its
/// combination's global trajectory, softmax-normalised within each combination.
pub fn pcw_weights(
    reports: &[RoundReport],
    global_trajs: &BTreeMap<String, ParamVector>,
    temperature: f64,
) -> Result<PcwWeights> {
    let mut groups: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for r in reports {
        let g = global_trajs
            .get(&r.combo_key)
            .ok_or_else(|| Error::State(format!("no global trajectory for {}", r.combo_key)))?;
        let rho = cumulative_gradient(r)?.dot(g)?;
        groups.entry(&r.combo_key).or_default().push((r.institution_id, rho));
    }
    let mut out = PcwWeights::default();
    for (key, members) in groups {
        if members.is_empty() {
            log::warn!("combination {key} has no members; skipping client weights");
            continue;
        }
        let scores: Vec<f64> = members.iter().map(|(_, s)| *s).collect();
        let w = softmax_weights(&scores, temperature);
        out.similarity
            .insert(key.to_string(), members.iter().map(|(id, s)| (*id, *s)).collect());
        out.weights
            .insert(key.to_string(), members.iter().zip(w).map(|((id, _), w)| (*id, w)).collect());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustedLoss {
    pub train: f64,
    pub val: f64,
}

/// Per-combination `(1/count) Σ ρ̄ L` of train and validation losses. Without
/// client weights every ρ̄ is 1, giving the plain mean.
pub fn adjusted_losses(reports: &[RoundReport], pcw: Option<&PcwWeights>) -> Result<BTreeMap<String, AdjustedLoss>> {
    let mut acc: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for r in reports {
        let w = match pcw {
            Some(p) => p.weight(&r.combo_key, r.institution_id).ok_or_else(|| {
                Error::State(format!("no client weight for institution {} in {}", r.institution_id, r.combo_key))
            })?,
            None => 1.0,
        };
        let e = acc.entry(&r.combo_key).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += w * r.train_loss;
        e.2 += w * r.val_loss;
    }
    Ok(acc
        .into_iter()
        .map(|(k, (n, tr, va))| {
            let n = n as f64;
            (k.to_string(), AdjustedLoss { train: tr / n, val: va / n })
        })
        .collect())
}

/// Ratio of squared generalization change to squared overfitting change
/// between two consecutive points.
pub fn dogr_ratio(prev: OgPoint, cur: OgPoint, signed: bool) -> f64 {
    let dg = cur.generalization - prev.generalization;
    let d_o = cur.overfitting - prev.overfitting;
    if signed && dg > 0.0 {
        return 0.0;
    }
    dg * dg / (d_o * d_o + DOGR_EPS)
}

/// Scales ratios so they sum to 2. When every ratio is below [`DOGR_EPS`]
/// the groups share the budget uniformly.
pub fn normalize_dogr(ratios: &[f64]) -> Vec<f64> {
    if ratios.is_empty() {
        return Vec::new();
    }
    if ratios.iter().all(|r| *r < DOGR_EPS) {
        log::warn!("all DOGR ratios vanish; using uniform coefficients");
        return vec![2.0 / ratios.len() as f64; ratios.len()];
    }
    let phi: f64 = ratios.iter().sum::<f64>() / 2.0;
    ratios.iter().map(|r| r / phi).collect()
}

/// DOGR coefficients for an institution holding `combo`: one per encoder,
/// from the history of the single-modality combination, and one for the
/// classifier, from the history of `combo` itself. `None` until every needed
/// key has two history points.
pub fn dogr_coefficients(
    history: &BTreeMap<String, VecDeque<OgPoint>>,
    combo: &ModalityCombination,
    signed: bool,
) -> Option<BTreeMap<GroupId, f64>> {
    let ratio = |key: &str| -> Option<f64> {
        let h = history.get(key)?;
        if h.len() < 2 {
            return None;
        }
        Some(dogr_ratio(h[h.len() - 2], h[h.len() - 1], signed))
    };
    let mut groups = Vec::with_capacity(combo.len() + 1);
    let mut ratios = Vec::with_capacity(combo.len() + 1);
    for m in combo.modalities() {
        groups.push(m.encoder_group());
        ratios.push(ratio(m.as_str())?);
    }
    groups.push(classifier_group());
    ratios.push(ratio(&combo.key())?);
    Some(groups.into_iter().zip(normalize_dogr(&ratios)).collect())
}

/// Everything one round produced, in institution order.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub t: usize,
    pub eta: f64,
    pub reports: Vec<RoundReport>,
    pub gamma: Vec<BTreeMap<GroupId, f64>>,
    pub pcw: Option<PcwWeights>,
    pub adjusted: BTreeMap<String, AdjustedLoss>,
    pub og: BTreeMap<String, OgPoint>,
}

pub struct Federation {
    config: FederationConfig,
    registry: ArchRegistry,
    num_classes: usize,
    universe: Vec<ModalityId>,
    clients: Vec<ClientState>,
    server: ServerState,
}

impl Federation {
    pub fn new(
        datasets: Vec<InstitutionDataset>,
        registry: ArchRegistry,
        num_classes: usize,
        universe: Vec<ModalityId>,
        config: FederationConfig,
    ) -> Result<Self> {
        config.validate()?;
        registry.validate(&universe)?;
        if datasets.is_empty() {
            return Err(Error::Config("federation needs at least one institution".into()));
        }
        let full = ModalityCombination::new(universe.iter().cloned())?;
        let mut combos: Vec<ModalityCombination> = Vec::new();
        for d in &datasets {
            if !d.combination.is_subset_of(&universe) {
                return Err(Error::Config(format!("institution {} holds modalities outside the universe", d.institution_id)));
            }
            if config.mode == MethodMode::UmFl && d.combination != full {
                return Err(Error::Config(format!(
                    "um-fl requires every institution to hold {full}, institution {} holds {}",
                    d.institution_id, d.combination
                )));
            }
            if config.batch_size > d.train.len() {
                return Err(Error::Config(format!(
                    "batch_size {} exceeds institution {}'s {} training points",
                    config.batch_size,
                    d.institution_id,
                    d.train.len()
                )));
            }
            if !combos.contains(&d.combination) {
                combos.push(d.combination.clone());
            }
        }
        combos.push(full);
        let server = ServerState::init(&combos, &registry, num_classes, config.seed, config.temperature)?;
        let clients = datasets
            .into_iter()
            .map(|d| {
                let net = build_network(&d.combination, &registry, num_classes, config.seed)?;
                ClientState::new(d, net, config.seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            config,
            registry,
            num_classes,
            universe,
            clients,
            server,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn registry(&self) -> &ArchRegistry {
        &self.registry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn universe(&self) -> &[ModalityId] {
        &self.universe
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// Runs one synchronous round. Errors carry the round index.
    pub fn round(&mut self) -> Result<RoundOutcome> {
        let t = self.server.round;
        self.round_inner(t).map_err(|e| e.in_round(t))
    }

    fn round_inner(&mut self, t: usize) -> Result<RoundOutcome> {
        let cfg = self.config.clone();
        let eta = cfg.schedule.rate(t);

        for c in &mut self.clients {
            let p = self.server.params_for(&c.dataset.combination)?;
            c.net.load(&p)?;
            let gamma = if cfg.mode.uses_dgb() && t >= 2 {
                dogr_coefficients(&self.server.og_history, &c.dataset.combination, cfg.signed_dogr)
                    .unwrap_or_else(|| initial_gamma(&c.dataset.combination))
            } else {
                initial_gamma(&c.dataset.combination)
            };
            c.set_gamma(gamma)?;
        }
        let gamma: Vec<BTreeMap<GroupId, f64>> = self.clients.iter().map(|c| c.gamma.clone()).collect();

        let reports: Vec<RoundReport> = self
            .clients
            .par_iter_mut()
            .map(|c| local_train(c, eta, cfg.local_steps, cfg.batch_size))
            .collect::<Result<Vec<_>>>()?;

        let prev = self.server.clone();
        let encoders = aggregate_encoders(&reports, &self.universe)?;
        let classifiers = aggregate_classifiers(&reports)?;
        self.server.encoders.extend(encoders);
        self.server.classifiers.extend(classifiers);

        let pcw = if cfg.mode.uses_pcw() {
            let mut trajs = BTreeMap::new();
            for c in &self.clients {
                let key = c.dataset.combination.key();
                if !trajs.contains_key(&key) {
                    let g = global_trajectory(&prev, &self.server, &c.dataset.combination)?;
                    trajs.insert(key, g);
                }
            }
            let w = pcw_weights(&reports, &trajs, self.server.temperature)?;
            self.server.pcw = w.clone();
            Some(w)
        } else {
            None
        };

        let adjusted = adjusted_losses(&reports, pcw.as_ref())?;
        let og: BTreeMap<String, OgPoint> = adjusted
            .iter()
            .map(|(k, l)| (k.clone(), overfitting_generalization(l.train, l.val)))
            .collect();
        for (k, p) in &og {
            self.server.push_og(k, *p);
        }
        self.server.round += 1;
        Ok(RoundOutcome {
            t,
            eta,
            reports,
            gamma,
            pcw,
            adjusted,
            og,
        })
    }
}

/// Runs all configured rounds, recording global evaluation on `test` after
/// each. `threads` caps the worker pool; results do not depend on it.
pub fn run_federation(
    datasets: Vec<InstitutionDataset>,
    test: &GlobalDataset,
    registry: &ArchRegistry,
    config: &FederationConfig,
    threads: Option<usize>,
) -> Result<RunResult> {
    let mut fed = Federation::new(datasets, registry.clone(), test.num_classes, test.modalities(), config.clone())?;
    let body = |fed: &mut Federation| -> Result<RunResult> {
        let mut records = Vec::with_capacity(config.rounds);
        for _ in 0..config.rounds {
            let outcome = fed.round()?;
            let t = outcome.t;
            records.push(harness::record_round(fed, &outcome, test).map_err(|e| e.in_round(t))?);
            log::info!(
                "[{}] round {t}: global accuracy {:.4}, pooled val accuracy {:.4}",
                config.mode,
                records[t].global.accuracy,
                records[t].val_accuracy
            );
        }
        Ok(RunResult {
            mode: config.mode,
            seed: config.seed,
            config: config.clone(),
            cohorts: test.cohorts.clone(),
            universe: fed.universe().to_vec(),
            records,
            final_model: ModelSnapshot::from_server(fed.server(), fed.registry(), fed.num_classes()),
        })
    };
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| body(&mut fed))
        }
        None => body(&mut fed),
    }
}
