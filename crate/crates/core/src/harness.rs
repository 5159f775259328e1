//! Evaluation, per-round metric records, CSV export and method comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Datapoint, GlobalDataset, Heterogeneity};
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig, MethodMode, RoundOutcome, ServerState};
use crate::model::{build_network, ArchRegistry, ModalityCombination, ModalityId, MultiModalNet};
use crate::nn::{argmax, nll, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_cohort_accuracy: BTreeMap<String, f64>,
    pub per_cohort_count: BTreeMap<String, usize>,
    pub n_points: usize,
}

/// Argmax accuracy and mean cross-entropy of `net` over `points`, whose
/// features are restricted to the network's combination first.
pub fn evaluate_net(net: &MultiModalNet, points: &[Datapoint]) -> Result<EvalResult> {
    if points.is_empty() {
        return Err(Error::Evaluation("no points to evaluate".into()));
    }
    let combo = net.combination();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut cohort: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in points {
        let logp = if p.features.len() == combo.len() {
            net.predict(&p.features)
        } else {
            net.predict(&p.restricted(combo)?.features)
        }
        .map_err(|e| Error::Evaluation(format!("point {}: {e}", p.id)))?;
        let hit = argmax(&logp) == p.label;
        correct += hit as usize;
        loss += nll(&logp, p.label);
        let e = cohort.entry(p.cohort.clone()).or_insert((0, 0));
        e.0 += hit as usize;
        e.1 += 1;
    }
    let n = points.len();
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss / n as f64,
        per_cohort_accuracy: cohort.iter().map(|(c, (h, k))| (c.clone(), *h as f64 / *k as f64)).collect(),
        per_cohort_count: cohort.into_iter().map(|(c, (_, k))| (c, k)).collect(),
        n_points: n,
    })
}

/// Evaluates the global model for `combo` (aggregated encoders plus that
/// combination's classifier) on `dataset`.
pub fn evaluate_global(
    server: &ServerState,
    registry: &ArchRegistry,
    num_classes: usize,
    dataset: &GlobalDataset,
    combo: &ModalityCombination,
) -> Result<EvalResult> {
    let net = server
        .network(combo, registry, num_classes)
        .map_err(|e| Error::Evaluation(format!("global model for {combo}: {e}")))?;
    evaluate_net(&net, &dataset.points)
}

/// Rounds to nine significant digits, the precision of every exported float.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn round_eval(e: &EvalResult) -> EvalResult {
    EvalResult {
        accuracy: sig9(e.accuracy),
        mean_loss: sig9(e.mean_loss),
        per_cohort_accuracy: e.per_cohort_accuracy.iter().map(|(k, v)| (k.clone(), sig9(*v))).collect(),
        per_cohort_count: e.per_cohort_count.clone(),
        n_points: e.n_points,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboRecord {
    pub combo_key: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub overfitting: f64,
    pub generalization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstitutionRecord {
    pub institution_id: usize,
    pub combo_key: String,
    pub category: usize,
    /// Learning-rate multiplier per parameter group id.
    pub gamma: BTreeMap<String, f64>,
    pub rho_bar: Option<f64>,
}

/// Metrics of one round. Floats are stored at export precision so records
/// survive a CSV round trip unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub combos: Vec<ComboRecord>,
    pub institutions: Vec<InstitutionRecord>,
    /// Full-combination global model on the held-out test split.
    pub global: EvalResult,
    /// Pooled accuracy of each institution's global combination model on its
    /// own validation split.
    pub val_accuracy: f64,
    /// Test accuracy of every combination's global model.
    pub combo_accuracy: BTreeMap<String, f64>,
}

pub fn record_round(fed: &Federation, outcome: &RoundOutcome, test: &GlobalDataset) -> Result<RoundRecord> {
    let server = fed.server();
    let (reg, nc) = (fed.registry(), fed.num_classes());
    let mut nets: BTreeMap<String, MultiModalNet> = BTreeMap::new();
    for key in server.classifiers.keys() {
        let combo = ModalityCombination::from_key(key)?;
        nets.insert(key.clone(), server.network(&combo, reg, nc)?);
    }
    let full = ModalityCombination::new(fed.universe().iter().cloned())?;
    let mut combo_accuracy = BTreeMap::new();
    let mut global = None;
    for (key, net) in &nets {
        let e = evaluate_net(net, &test.points)?;
        combo_accuracy.insert(key.clone(), sig9(e.accuracy));
        if *key == full.key() {
            global = Some(e);
        }
    }
    let global = global.ok_or_else(|| Error::Evaluation("no global classifier for the full combination".into()))?;

    let (mut hits, mut total) = (0usize, 0usize);
    for c in fed.clients() {
        let e = evaluate_net(&nets[&c.dataset.combination.key()], &c.dataset.val)?;
        hits += (e.accuracy * e.n_points as f64).round() as usize;
        total += e.n_points;
    }

    let combos = outcome
        .adjusted
        .iter()
        .map(|(k, l)| {
            let og = outcome.og[k];
            ComboRecord {
                combo_key: k.clone(),
                train_loss: sig9(l.train),
                val_loss: sig9(l.val),
                overfitting: sig9(og.overfitting),
                generalization: sig9(og.generalization),
            }
        })
        .collect();
    let institutions = fed
        .clients()
        .iter()
        .zip(&outcome.gamma)
        .map(|(c, g)| {
            let key = c.dataset.combination.key();
            InstitutionRecord {
                institution_id: c.institution_id,
                category: c.dataset.category,
                gamma: g.iter().map(|(k, v)| (k.to_string(), sig9(*v))).collect(),
                rho_bar: outcome.pcw.as_ref().and_then(|p| p.weight(&key, c.institution_id)).map(sig9),
                combo_key: key,
            }
        })
        .collect();
    Ok(RoundRecord {
        t: outcome.t,
        combos,
        institutions,
        global: round_eval(&global),
        val_accuracy: sig9(hits as f64 / total.max(1) as f64),
        combo_accuracy,
    })
}

/// Global parameters plus what is needed to rebuild networks from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub num_classes: usize,
    pub registry: ArchRegistry,
    pub encoders: BTreeMap<ModalityId, Vec<f64>>,
    pub classifiers: BTreeMap<String, Vec<f64>>,
}

impl ModelSnapshot {
    pub fn from_server(server: &ServerState, registry: &ArchRegistry, num_classes: usize) -> Self {
        ModelSnapshot {
            num_classes,
            registry: registry.clone(),
            encoders: server.encoders.iter().map(|(m, p)| (m.clone(), p.values().to_vec())).collect(),
            classifiers: server.classifiers.iter().map(|(k, p)| (k.clone(), p.values().to_vec())).collect(),
        }
    }

    pub fn network(&self, combo: &ModalityCombination) -> Result<MultiModalNet> {
        let mut net = build_network(combo, &self.registry, self.num_classes, 0)?;
        let mut values = Vec::with_capacity(net.param_count());
        for m in combo.modalities() {
            values.extend(
                self.encoders
                    .get(m)
                    .ok_or_else(|| Error::Evaluation(format!("snapshot has no encoder for {m}")))?,
            );
        }
        let key = combo.key();
        values.extend(
            self.classifiers
                .get(&key)
                .ok_or_else(|| Error::Evaluation(format!("snapshot has no classifier for {key}")))?,
        );
        net.load(&ParamVector::new(values, net.layout())?)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: MethodMode,
    pub seed: u64,
    pub config: FederationConfig,
    pub cohorts: Vec<String>,
    pub universe: Vec<ModalityId>,
    pub records: Vec<RoundRecord>,
    pub final_model: ModelSnapshot,
}

impl RunResult {
    /// Test accuracy of the global model at [`best_round`].
    pub fn best_accuracy(&self) -> Option<f64> {
        best_round(&self.records).map(|t| self.records[t].global.accuracy)
    }
}

/// Round with the highest pooled validation accuracy, earliest on ties.
pub fn best_round(records: &[RoundRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|(_, v)| r.val_accuracy > v) {
            best = Some((i, r.val_accuracy));
        }
    }
    best.map(|(i, _)| i)
}

fn fmt_f(x: f64) -> String {
    format!("{}", sig9(x))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

fn gamma_columns(universe: &[ModalityId]) -> Vec<String> {
    universe
        .iter()
        .map(|m| m.encoder_group().to_string())
        .chain(std::iter::once(crate::model::classifier_group().to_string()))
        .collect()
}

/// Identity of a run for the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub mode: MethodMode,
    pub rounds: usize,
    pub best_round: Option<usize>,
    pub version: String,
}

pub fn version_string() -> String {
    option_env!("MMFL_BUILD_VERSION")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// SHA-256 hex digest of a JSON document in canonical (sorted-key) form.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("json value serialises");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `rounds.csv`, `institutions.csv`, `global.csv`, `combo_eval.csv`,
/// `final_model.json` and `manifest.json` into `dir`. `config` is the
/// document whose hash identifies the run.
pub fn export_metrics(run: &RunResult, config: &serde_json::Value, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, contents: String| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, &contents)?;
        written.push(p);
        Ok(())
    };

    let header: Vec<String> = ["t", "combo_key", "train_loss", "val_loss", "overfitting", "generalization"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = run
        .records
        .iter()
        .flat_map(|r| {
            r.combos.iter().map(move |c| {
                vec![
                    r.t.to_string(),
                    c.combo_key.clone(),
                    fmt_f(c.train_loss),
                    fmt_f(c.val_loss),
                    fmt_f(c.overfitting),
                    fmt_f(c.generalization),
                ]
            })
        })
        .collect();
    emit("rounds.csv", csv_string(&header, &rows))?;

    let gcols = gamma_columns(&run.universe);
    let mut header: Vec<String> = ["t", "institution_id", "combo_key", "category"].map(String::from).to_vec();
    header.extend(gcols.iter().map(|g| format!("gamma:{g}")));
    header.push("rho_bar".into());
    let mut rows = Vec::new();
    for r in &run.records {
        for i in &r.institutions {
            let mut row = vec![r.t.to_string(), i.institution_id.to_string(), i.combo_key.clone(), i.category.to_string()];
            row.extend(gcols.iter().map(|g| i.gamma.get(g).map(|v| fmt_f(*v)).unwrap_or_default()));
            row.push(i.rho_bar.map(fmt_f).unwrap_or_default());
            rows.push(row);
        }
    }
    emit("institutions.csv", csv_string(&header, &rows))?;

    let mut header: Vec<String> = ["t", "accuracy", "loss", "val_accuracy", "n_points"].map(String::from).to_vec();
    for c in &run.cohorts {
        header.push(format!("accuracy:{c}"));
        header.push(format!("n:{c}"));
    }
    let rows: Vec<Vec<String>> = run
        .records
        .iter()
        .map(|r| {
            let g = &r.global;
            let mut row = vec![
                r.t.to_string(),
                fmt_f(g.accuracy),
                fmt_f(g.mean_loss),
                fmt_f(r.val_accuracy),
                g.n_points.to_string(),
            ];
            for c in &run.cohorts {
                row.push(g.per_cohort_accuracy.get(c).map(|v| fmt_f(*v)).unwrap_or_default());
                row.push(g.per_cohort_count.get(c).map(|v| v.to_string()).unwrap_or_default());
            }
            row
        })
        .collect();
    emit("global.csv", csv_string(&header, &rows))?;

    let header: Vec<String> = ["t", "combo_key", "accuracy"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = run
        .records
        .iter()
        .flat_map(|r| r.combo_accuracy.iter().map(move |(k, a)| vec![r.t.to_string(), k.clone(), fmt_f(*a)]))
        .collect();
    emit("combo_eval.csv", csv_string(&header, &rows))?;

    let model = serde_json::to_string(&run.final_model).expect("snapshot serialises");
    emit("final_model.json", model + "\n")?;

    let manifest = Manifest {
        config_hash: config_hash(config),
        seed: run.seed,
        mode: run.mode,
        rounds: run.records.len(),
        best_round: best_round(&run.records),
        version: version_string(),
    };
    emit("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n")?;
    Ok(written)
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let bad = |msg: String| Error::Ingestion {
        path: path.display().to_string(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()).map_err(|e| bad(e.to_string())))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| Error::Ingestion {
        path: path.display().to_string(),
        msg: format!("{s:?}: {e}"),
    })
}

/// Reads the CSV exports of a run back into round records.
pub fn read_metrics(dir: &Path) -> Result<Vec<RoundRecord>> {
    let p = dir.join("global.csv");
    let (header, rows) = read_table(&p)?;
    let cohorts: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("accuracy:").map(String::from))
        .collect();
    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        let mut per_cohort_accuracy = BTreeMap::new();
        let mut per_cohort_count = BTreeMap::new();
        for (j, c) in cohorts.iter().enumerate() {
            let (a, n) = (&row[5 + 2 * j], &row[6 + 2 * j]);
            if !a.is_empty() {
                per_cohort_accuracy.insert(c.clone(), parse(&p, a)?);
                per_cohort_count.insert(c.clone(), parse(&p, n)?);
            }
        }
        records.push(RoundRecord {
            t: parse(&p, &row[0])?,
            combos: Vec::new(),
            institutions: Vec::new(),
            global: EvalResult {
                accuracy: parse(&p, &row[1])?,
                mean_loss: parse(&p, &row[2])?,
                per_cohort_accuracy,
                per_cohort_count,
                n_points: parse(&p, &row[4])?,
            },
            val_accuracy: parse(&p, &row[3])?,
            combo_accuracy: BTreeMap::new(),
        });
    }
    let slot = |records: &mut Vec<RoundRecord>, p: &Path, t: &str| -> Result<usize> {
        let t: usize = parse(p, t)?;
        if t >= records.len() {
            return Err(Error::Ingestion {
                path: p.display().to_string(),
                msg: format!("round {t} missing from global.csv"),
            });
        }
        Ok(t)
    };

    let p = dir.join("rounds.csv");
    for row in read_table(&p)?.1 {
        let t = slot(&mut records, &p, &row[0])?;
        records[t].combos.push(ComboRecord {
            combo_key: row[1].clone(),
            train_loss: parse(&p, &row[2])?,
            val_loss: parse(&p, &row[3])?,
            overfitting: parse(&p, &row[4])?,
            generalization: parse(&p, &row[5])?,
        });
    }

    let p = dir.join("institutions.csv");
    let (header, rows) = read_table(&p)?;
    let gcols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(j, h)| h.strip_prefix("gamma:").map(|g| (j, g.to_string())))
        .collect();
    let rho_col = header.len() - 1;
    for row in rows {
        let t = slot(&mut records, &p, &row[0])?;
        let mut gamma = BTreeMap::new();
        for (j, g) in &gcols {
            if !row[*j].is_empty() {
                gamma.insert(g.clone(), parse(&p, &row[*j])?);
            }
        }
        records[t].institutions.push(InstitutionRecord {
            institution_id: parse(&p, &row[1])?,
            combo_key: row[2].clone(),
            category: parse(&p, &row[3])?,
            gamma,
            rho_bar: if row[rho_col].is_empty() { None } else { Some(parse(&p, &row[rho_col])?) },
        });
    }

    let p = dir.join("combo_eval.csv");
    for row in read_table(&p)?.1 {
        let t = slot(&mut records, &p, &row[0])?;
        records[t].combo_accuracy.insert(row[1].clone(), parse(&p, &row[2])?);
    }
    Ok(records)
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Best-round accuracies of one (mode, heterogeneity) cell, one per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub mode: MethodMode,
    pub heterogeneity: Heterogeneity,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mode: MethodMode,
    pub heterogeneity: Heterogeneity,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl CellSummary {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub cells: Vec<CellSummary>,
}

impl ComparisonTable {
    pub fn get(&self, mode: MethodMode, heterogeneity: Heterogeneity) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.mode == mode && c.heterogeneity == heterogeneity)
    }

    /// One row per method, a median/IQR/n column triple per heterogeneity.
    pub fn to_csv(&self) -> String {
        let mut modes: Vec<MethodMode> = self.cells.iter().map(|c| c.mode).collect();
        modes.sort();
        modes.dedup();
        let mut hets: Vec<Heterogeneity> = Vec::new();
        for c in &self.cells {
            if !hets.contains(&c.heterogeneity) {
                hets.push(c.heterogeneity);
            }
        }
        let mut header = vec!["method".to_string()];
        for h in &hets {
            header.extend(["median", "iqr", "n"].map(|s| format!("{}_{s}", h.as_str())));
        }
        let rows: Vec<Vec<String>> = modes
            .iter()
            .map(|m| {
                let mut row = vec![m.as_str().to_string()];
                for h in &hets {
                    match self.get(*m, *h) {
                        Some(c) => row.extend([fmt_f(c.median), fmt_f(c.iqr()), c.n.to_string()]),
                        None => row.extend([String::new(), String::new(), String::new()]),
                    }
                }
                row
            })
            .collect();
        csv_string(&header, &rows)
    }
}

/// Median and quartiles of each cell's best-round accuracies.
pub fn compare_methods(cells: &[GridCell]) -> Result<ComparisonTable> {
    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        if c.accuracies.is_empty() {
            return Err(Error::Config(format!("grid cell {} / {} has no seeds", c.mode, c.heterogeneity.as_str())));
        }
        let mut v = c.accuracies.clone();
        v.sort_by(f64::total_cmp);
        out.push(CellSummary {
            mode: c.mode,
            heterogeneity: c.heterogeneity,
            n: v.len(),
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        });
    }
    Ok(ComparisonTable { cells: out })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoStat {
    pub institution_id: usize,
    pub combo_key: String,
    pub category: usize,
    pub mean: f64,
    /// Sample standard deviation over rounds; zero with fewer than two rounds.
    pub sd: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RhoSummary {
    pub stats: Vec<RhoStat>,
    pub note: Option<String>,
}

impl RhoSummary {
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = ["institution_id", "combo_key", "category", "mean", "sd", "rounds"]
            .map(String::from)
            .to_vec();
        let rows: Vec<Vec<String>> = self
            .stats
            .iter()
            .map(|s| {
                vec![
                    s.institution_id.to_string(),
                    s.combo_key.clone(),
                    s.category.to_string(),
                    fmt_f(s.mean),
                    fmt_f(s.sd),
                    s.rounds.to_string(),
                ]
            })
            .collect();
        csv_string(&header, &rows)
    }
}

/// Per-institution mean and spread of client weights over the run, ordered
/// by combination then category.
pub fn rho_distribution(run: &RunResult) -> RhoSummary {
    if !run.mode.uses_pcw() {
        return RhoSummary {
            stats: Vec::new(),
            note: Some(format!("mode {} computes no client weights", run.mode)),
        };
    }
    let mut series: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &run.records {
        for i in &r.institutions {
            if let Some(rho) = i.rho_bar {
                series
                    .entry((i.combo_key.clone(), i.category, i.institution_id))
                    .or_default()
                    .push(rho);
            }
        }
    }
    let stats = series
        .into_iter()
        .map(|((combo_key, category, institution_id), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = if v.len() < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            RhoStat {
                institution_id,
                combo_key,
                category,
                mean,
                sd,
                rounds: v.len(),
            }
        })
        .collect();
    RhoSummary { stats, note: None }
}
