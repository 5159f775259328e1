//! Datasets: synthetic multi-cohort generation, CSV ingestion, and non-iid
//! partitioning into institution datasets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureMap, ModalityCombination, ModalityId};
use crate::rng;

/// Cohort names of the TCGA-like default.
pub const DEFAULT_COHORTS: [&str; 3] = ["BRCA", "LUSC", "LIHC"];

/// Patients per (cohort, stage) in the source cohorts; rows are cohorts in
/// [`DEFAULT_COHORTS`] order, columns stages I, II, III.
pub const STAGE_COUNTS: [[usize; 3]; 3] = [[155, 488, 208], [152, 108, 44], [152, 77, 74]];

#[derive(Clone, Debug, PartialEq)]
pub struct Datapoint {
    pub id: String,
    pub features: FeatureMap,
    pub label: usize,
    pub cohort: String,
}

impl Datapoint {
    /// Copy keeping only the modalities in `combo`.
    pub fn restricted(&self, combo: &ModalityCombination) -> Result<Datapoint> {
        let mut features = FeatureMap::new();
        for m in combo.modalities() {
            let v = self.features.get(m).ok_or_else(|| {
                Error::Input(format!("datapoint {} has no {m} features", self.id))
            })?;
            features.insert(m.clone(), v.clone());
        }
        Ok(Datapoint {
            id: self.id.clone(),
            features,
            label: self.label,
            cohort: self.cohort.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDataset {
    pub points: Vec<Datapoint>,
    pub modality_dims: BTreeMap<ModalityId, usize>,
    pub num_classes: usize,
    pub cohorts: Vec<String>,
}

impl GlobalDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        self.modality_dims.keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        let mut ids = BTreeSet::new();
        for p in &self.points {
            if !ids.insert(&p.id) {
                return Err(Error::Validation(format!("duplicate datapoint id {}", p.id)));
            }
            if p.label >= self.num_classes {
                return Err(Error::Validation(format!(
                    "datapoint {} has label {} but only {} classes",
                    p.id, p.label, self.num_classes
                )));
            }
            if !self.cohorts.contains(&p.cohort) {
                return Err(Error::Validation(format!("datapoint {} has unknown cohort {}", p.id, p.cohort)));
            }
            for (m, d) in &self.modality_dims {
                match p.features.get(m) {
                    Some(v) if v.len() == *d => {}
                    _ => {
                        return Err(Error::Validation(format!(
                            "datapoint {} lacks a {d}-wide {m} feature vector",
                            p.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Datapoints per class, as fractions of the dataset.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut c = vec![0usize; self.num_classes];
        for p in &self.points {
            c[p.label] += 1;
        }
        let n = self.points.len().max(1) as f64;
        c.into_iter().map(|v| v as f64 / n).collect()
    }

    pub fn cohort_fractions(&self) -> Vec<f64> {
        let n = self.points.len().max(1) as f64;
        self.cohorts
            .iter()
            .map(|c| self.points.iter().filter(|p| &p.cohort == c).count() as f64 / n)
            .collect()
    }

    fn with_points(&self, points: Vec<Datapoint>) -> GlobalDataset {
        GlobalDataset {
            points,
            modality_dims: self.modality_dims.clone(),
            num_classes: self.num_classes,
            cohorts: self.cohorts.clone(),
        }
    }

    /// Withholds `fraction` of the points, stratified by (cohort, class).
    /// Returns `(remaining, held_out)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(GlobalDataset, GlobalDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let strata = Strata::new(self, seed);
        let sizes: Vec<f64> = strata.cells.iter().map(|c| c.len() as f64).collect();
        let names: Vec<String> = strata.names.clone();
        let total = (fraction * self.len() as f64).round() as usize;
        let quotas = largest_remainder(total, &sizes, &names);
        let mut rest = Vec::new();
        let mut held = Vec::new();
        for (cell, q) in strata.cells.iter().zip(quotas) {
            let q = q.min(cell.len());
            held.extend(cell[..q].iter().map(|&i| self.points[i].clone()));
            rest.extend(cell[q..].iter().map(|&i| self.points[i].clone()));
        }
        rest.sort_by(|a, b| a.id.cmp(&b.id));
        held.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((self.with_points(rest), self.with_points(held)))
    }
}

/// Feature-generation parameters of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySignal {
    pub dim: usize,
    /// Scale of class-mean separation inside each cohort's informative subspace.
    pub signal: f64,
    /// Standard deviation of per-point Gaussian noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modalities: BTreeMap<ModalityId, ModalitySignal>,
    pub cohorts: Vec<String>,
    pub num_classes: usize,
    /// `counts[cohort][class]`.
    pub counts: Vec<Vec<usize>>,
    /// Share of each modality's dimensions forming one cohort's informative subspace.
    pub informative_fraction: f64,
    /// Standard deviation of the per-cohort mean offset.
    pub cohort_shift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// TCGA-like layout: three cohorts, stage counts from [`STAGE_COUNTS`]
    /// multiplied by `scale`. Binary tasks keep stages I and II.
    pub fn tcga_like(num_classes: usize, scale: usize, seed: u64) -> Result<Self> {
        if !(2..=3).contains(&num_classes) {
            return Err(Error::Config(format!("num_classes must be 2 or 3, got {num_classes}")));
        }
        let counts = STAGE_COUNTS
            .iter()
            .map(|row| row[..num_classes].iter().map(|c| c * scale).collect())
            .collect();
        let mut modalities = BTreeMap::new();
        modalities.insert(ModalityId::from("mrna"), ModalitySignal { dim: 64, signal: 1.0, noise: 1.0 });
        modalities.insert(ModalityId::from("image"), ModalitySignal { dim: 150, signal: 1.0, noise: 1.0 });
        modalities.insert(ModalityId::from("clinical"), ModalitySignal { dim: 16, signal: 1.0, noise: 1.0 });
        Ok(SyntheticSpec {
            modalities,
            cohorts: DEFAULT_COHORTS.iter().map(|s| s.to_string()).collect(),
            num_classes,
            counts,
            informative_fraction: 0.25,
            cohort_shift: 0.5,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("synthetic spec has no modalities".into()));
        }
        for (m, s) in &self.modalities {
            if s.dim == 0 {
                return Err(Error::Config(format!("modality {m} has zero dimension")));
            }
            if !(s.noise >= 0.0) || !s.signal.is_finite() {
                return Err(Error::Config(format!("modality {m} has invalid signal/noise")));
            }
        }
        if self.num_classes == 0 || self.cohorts.is_empty() {
            return Err(Error::Config("need at least one class and one cohort".into()));
        }
        if self.counts.len() != self.cohorts.len()
            || self.counts.iter().any(|r| r.len() != self.num_classes)
        {
            return Err(Error::Config("counts must be a cohorts x classes table".into()));
        }
        if self.counts.iter().flatten().any(|&c| c == 0) {
            return Err(Error::Config("every (cohort, class) count must be positive".into()));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return Err(Error::Config("informative_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

/// Gaussian clusters per (cohort, class, modality). Every cohort owns a
/// distinct informative subspace of each modality in which its class means
/// differ; outside it only the cohort offset and noise remain.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GlobalDataset> {
    spec.validate()?;
    // means[c][k][m]
    let mut means: Vec<Vec<BTreeMap<ModalityId, Vec<f64>>>> =
        vec![vec![BTreeMap::new(); spec.num_classes]; spec.cohorts.len()];
    for (m, sig) in &spec.modalities {
        let mut r = rng::stream(spec.seed, &format!("synthetic:means:{m}"));
        let mut order: Vec<usize> = (0..sig.dim).collect();
        order.shuffle(&mut r);
        let k = ((spec.informative_fraction * sig.dim as f64).round() as usize).clamp(1, sig.dim);
        for (c, per_class) in means.iter_mut().enumerate() {
            let subspace: Vec<usize> = (0..k).map(|j| order[(c * k + j) % sig.dim]).collect();
            let offset: Vec<f64> = (0..sig.dim).map(|_| spec.cohort_shift * gaussian(&mut r)).collect();
            for mean_by_mod in per_class.iter_mut() {
                let mut mu = offset.clone();
                for &i in &subspace {
                    mu[i] += sig.signal * gaussian(&mut r);
                }
                mean_by_mod.insert(m.clone(), mu);
            }
        }
    }
    let mut r = rng::stream(spec.seed, "synthetic:points");
    let mut points = Vec::new();
    for (c, cohort) in spec.cohorts.iter().enumerate() {
        for k in 0..spec.num_classes {
            for _ in 0..spec.counts[c][k] {
                let mut features = FeatureMap::new();
                for (m, sig) in &spec.modalities {
                    let mu = &means[c][k][m];
                    let v = mu.iter().map(|x| x + sig.noise * gaussian(&mut r)).collect();
                    features.insert(m.clone(), v);
                }
                points.push(Datapoint {
                    id: format!("p{:06}", points.len()),
                    features,
                    label: k,
                    cohort: cohort.clone(),
                });
            }
        }
    }
    Ok(GlobalDataset {
        points,
        modality_dims: spec.modalities.iter().map(|(m, s)| (m.clone(), s.dim)).collect(),
        num_classes: spec.num_classes,
        cohorts: spec.cohorts.clone(),
    })
}

/// JSON manifest naming one feature file per modality and a labels file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvManifest {
    pub modalities: BTreeMap<String, PathBuf>,
    pub labels: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub dataset: GlobalDataset,
    /// Patients present in some file but not in all of them.
    pub dropped: usize,
}

fn ingest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::Ingestion {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file))
}

fn read_feature_file(path: &Path) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let mut rdr = open_csv(path)?;
    let header = rdr
        .headers()
        .map_err(|e| ingest_err(path, format!("unreadable header: {e}")))?
        .clone();
    if header.get(0) != Some("patient_id") {
        return Err(ingest_err(path, "first header column must be patient_id"));
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(ingest_err(path, "header declares no feature columns"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(ingest_err(path, format!("header column {} is {name:?}, expected f{j}", j + 1)));
        }
    }
    let mut rows = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ingest_err(path, format!("row {line}: {e}")))?;
        if rec.len() != dim + 1 {
            return Err(ingest_err(
                path,
                format!("row {line} has {} feature values, header declares {dim}", rec.len().saturating_sub(1)),
            ));
        }
        let id = rec[0].to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| ingest_err(path, format!("row {line}: {e}")))?;
        if rows.insert(id.clone(), vals).is_some() {
            return Err(ingest_err(path, format!("row {line}: duplicate patient_id {id}")));
        }
    }
    Ok((dim, rows))
}

/// Loads a dataset from a JSON manifest; relative paths resolve against the
/// manifest's directory. Patients missing from any file are dropped.
pub fn load_csv(manifest_path: &Path) -> Result<CsvLoad> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Ingestion {
        path: manifest_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let manifest: CsvManifest = serde_json::from_str(&text)
        .map_err(|e| ingest_err(manifest_path, format!("bad manifest: {e}")))?;
    if manifest.modalities.is_empty() {
        return Err(ingest_err(manifest_path, "manifest lists no modalities"));
    }
    if manifest.num_classes == 0 {
        return Err(ingest_err(manifest_path, "num_classes must be positive"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut tables = BTreeMap::new();
    let mut dims = BTreeMap::new();
    for (name, p) in &manifest.modalities {
        let m = ModalityId::from(name.as_str());
        let (dim, rows) = read_feature_file(&resolve(p))?;
        dims.insert(m.clone(), dim);
        tables.insert(m, rows);
    }

    let labels_path = resolve(&manifest.labels);
    let mut rdr = open_csv(&labels_path)?;
    let header = rdr.headers().map_err(|e| ingest_err(&labels_path, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["patient_id", "label", "cohort"] {
        return Err(ingest_err(&labels_path, "header must be patient_id,label,cohort"));
    }
    let mut labels: Vec<(String, usize, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ingest_err(&labels_path, format!("row {line}: {e}")))?;
        if rec.len() != 3 {
            return Err(ingest_err(&labels_path, format!("row {line} has {} fields, expected 3", rec.len())));
        }
        let label: usize = rec[1]
            .trim()
            .parse()
            .map_err(|e| ingest_err(&labels_path, format!("row {line}: label: {e}")))?;
        if label >= manifest.num_classes {
            return Err(ingest_err(
                &labels_path,
                format!("row {line}: label {label} >= num_classes {}", manifest.num_classes),
            ));
        }
        if !seen.insert(rec[0].to_string()) {
            return Err(ingest_err(&labels_path, format!("row {line}: duplicate patient_id {}", &rec[0])));
        }
        labels.push((rec[0].to_string(), label, rec[2].to_string()));
    }

    let mut all_ids: BTreeSet<&str> = labels.iter().map(|(id, _, _)| id.as_str()).collect();
    for rows in tables.values() {
        all_ids.extend(rows.keys().map(String::as_str));
    }
    let mut points = Vec::new();
    for (id, label, cohort) in &labels {
        if tables.values().all(|t| t.contains_key(id)) {
            let features = tables.iter().map(|(m, t)| (m.clone(), t[id].clone())).collect();
            points.push(Datapoint {
                id: id.clone(),
                features,
                label: *label,
                cohort: cohort.clone(),
            });
        }
    }
    let dropped = all_ids.len() - points.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} patients missing from at least one file");
    }
    let cohorts: BTreeSet<String> = points.iter().map(|p| p.cohort.clone()).collect();
    Ok(CsvLoad {
        dataset: GlobalDataset {
            points,
            modality_dims: dims,
            num_classes: manifest.num_classes,
            cohorts: cohorts.into_iter().collect(),
        },
        dropped,
    })
}

/// Writes `dataset` as one CSV per modality, `labels.csv` and `manifest.json`
/// into `dir`. Returns the manifest path.
pub fn write_csv(dataset: &GlobalDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |p: &Path, e: csv::Error| Error::io(p, std::io::Error::other(e));
    let mut modalities = BTreeMap::new();
    for (m, dim) in &dataset.modality_dims {
        let file = format!("{m}.csv");
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut header = vec!["patient_id".to_string()];
        header.extend((0..*dim).map(|j| format!("f{j}")));
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for p in &dataset.points {
            let mut row = vec![p.id.clone()];
            row.extend(p.features[m].iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        modalities.insert(m.to_string(), PathBuf::from(file));
    }
    let path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["patient_id", "label", "cohort"]).map_err(|e| csv_err(&path, e))?;
    for p in &dataset.points {
        w.write_record([p.id.as_str(), &p.label.to_string(), p.cohort.as_str()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let manifest = CsvManifest {
        modalities,
        labels: PathBuf::from("labels.csv"),
        num_classes: dataset.num_classes,
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Splits `total` into integer parts proportional to `weights`, keeping each
/// part within one unit of its fractional target. Remainders are handed out by
/// descending fractional part, ties going to the earlier name.
pub fn largest_remainder(total: usize, weights: &[f64], names: &[String]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let targets: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| names[a].cmp(&names[b]))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

/// Integer table with the given row and column sums whose cells follow the
/// independence targets `rows[i] * cols[j] / total` as closely as a greedy
/// rounding allows.
fn joint_allocation(rows: &[usize], cols: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = rows.iter().sum();
    debug_assert_eq!(total, cols.iter().sum::<usize>());
    let mut cells = vec![vec![0usize; cols.len()]; rows.len()];
    if total == 0 {
        return cells;
    }
    let mut frac = vec![vec![0.0; cols.len()]; rows.len()];
    for i in 0..rows.len() {
        for j in 0..cols.len() {
            let t = rows[i] as f64 * cols[j] as f64 / total as f64;
            cells[i][j] = t.floor() as usize;
            frac[i][j] = t - t.floor();
        }
    }
    let mut row_def: Vec<usize> = (0..rows.len()).map(|i| rows[i] - cells[i].iter().sum::<usize>()).collect();
    let mut col_def: Vec<usize> =
        (0..cols.len()).map(|j| cols[j] - cells.iter().map(|r| r[j]).sum::<usize>()).collect();
    let mut bumped = vec![vec![false; cols.len()]; rows.len()];
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..rows.len() {
            if row_def[i] == 0 {
                continue;
            }
            for j in 0..cols.len() {
                if col_def[j] == 0 {
                    continue;
                }
                let key = |(a, b): (usize, usize)| (!bumped[a][b], frac[a][b]);
                match best {
                    None => best = Some((i, j)),
                    Some(b) => {
                        let (nb, nf) = key((i, j));
                        let (bb, bf) = key(b);
                        if nb > bb || (nb == bb && nf > bf) {
                            best = Some((i, j));
                        }
                    }
                }
            }
        }
        let Some((i, j)) = best else { break };
        cells[i][j] += 1;
        bumped[i][j] = true;
        row_def[i] -= 1;
        col_def[j] -= 1;
    }
    cells
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    Iid,
    TypeBased,
    ClassBased,
}

impl Heterogeneity {
    pub fn as_str(self) -> &'static str {
        match self {
            Heterogeneity::Iid => "iid",
            Heterogeneity::TypeBased => "type_based",
            Heterogeneity::ClassBased => "class_based",
        }
    }
}

impl std::str::FromStr for Heterogeneity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "iid" => Ok(Heterogeneity::Iid),
            "type_based" | "type" => Ok(Heterogeneity::TypeBased),
            "class_based" | "class" => Ok(Heterogeneity::ClassBased),
            other => Err(Error::Config(format!("unknown heterogeneity {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstitutionSpec {
    pub id: usize,
    pub combination: ModalityCombination,
    /// Heterogeneity category (1-based) selecting a row of the fraction table.
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub institutions: Vec<InstitutionSpec>,
    pub heterogeneity: Heterogeneity,
    /// Per category: cohort fractions (type-based, in dataset cohort order) or
    /// class fractions (class-based). Unused for iid.
    pub category_fractions: BTreeMap<usize, Vec<f64>>,
    pub points_per_institution: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

fn roster(combos: &[&[&str]]) -> Vec<InstitutionSpec> {
    combos
        .iter()
        .enumerate()
        .map(|(i, c)| InstitutionSpec {
            id: i + 1,
            combination: ModalityCombination::from_names(c).expect("static preset"),
            category: i % 3 + 1,
        })
        .collect()
}

/// 21 institutions, three per modality combination; categories cycle 1, 2, 3
/// within each triple.
pub fn roster_21() -> Vec<InstitutionSpec> {
    let combos: [&[&str]; 7] = [
        &["mrna", "image", "clinical"],
        &["mrna", "image"],
        &["mrna", "clinical"],
        &["image", "clinical"],
        &["mrna"],
        &["image"],
        &["clinical"],
    ];
    let expanded: Vec<&[&str]> = combos.iter().flat_map(|c| [*c, *c, *c]).collect();
    roster(&expanded)
}

/// Nine institutions: three tri-modal, one per bi-modal pair, one per single modality.
pub fn roster_9() -> Vec<InstitutionSpec> {
    let combos: [&[&str]; 9] = [
        &["mrna", "image", "clinical"],
        &["mrna", "image", "clinical"],
        &["mrna", "image", "clinical"],
        &["mrna", "image"],
        &["mrna", "clinical"],
        &["image", "clinical"],
        &["mrna"],
        &["image"],
        &["clinical"],
    ];
    roster(&combos)
}

/// Category fraction presets (normalised to sum to one). Type-based rows are
/// over cohorts in [`DEFAULT_COHORTS`] order, class-based rows over stages.
pub fn preset_fractions(heterogeneity: Heterogeneity, num_classes: usize) -> Result<BTreeMap<usize, Vec<f64>>> {
    let rows: [&[f64]; 3] = match (heterogeneity, num_classes) {
        (Heterogeneity::Iid, _) => return Ok(BTreeMap::new()),
        (Heterogeneity::TypeBased, 2) => [&[56.0, 22.0, 20.0], &[54.0, 10.0, 35.0], &[58.0, 35.0, 6.0]],
        (Heterogeneity::TypeBased, 3) => [&[58.0, 21.0, 21.0], &[48.0, 28.0, 24.0], &[62.0, 12.0, 26.0]],
        (Heterogeneity::ClassBased, 2) => [&[41.0, 59.0], &[62.0, 38.0], &[19.0, 81.0]],
        (Heterogeneity::ClassBased, 3) => [&[32.0, 46.0, 22.0], &[36.0, 34.0, 30.0], &[30.0, 54.0, 16.0]],
        (_, n) => return Err(Error::Config(format!("no fraction preset for {n} classes"))),
    };
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s: f64 = r.iter().sum();
            (i + 1, r.iter().map(|v| v / s).collect())
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstitutionDataset {
    pub institution_id: usize,
    pub category: usize,
    pub combination: ModalityCombination,
    pub train: Vec<Datapoint>,
    pub val: Vec<Datapoint>,
}

impl InstitutionDataset {
    /// `|D_n|`, train plus validation.
    pub fn size(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn train_samples(&self) -> Vec<(&FeatureMap, usize)> {
        self.train.iter().map(|p| (&p.features, p.label)).collect()
    }

    pub fn val_samples(&self) -> Vec<(&FeatureMap, usize)> {
        self.val.iter().map(|p| (&p.features, p.label)).collect()
    }
}

/// Indices of a dataset grouped into shuffled (cohort, class) cells.
struct Strata {
    /// `cells[cohort * num_classes + class]`
    cells: Vec<Vec<usize>>,
    names: Vec<String>,
}

impl Strata {
    fn new(ds: &GlobalDataset, seed: u64) -> Self {
        let nc = ds.num_classes;
        let mut cells = vec![Vec::new(); ds.cohorts.len() * nc];
        let cohort_ix: HashMap<&str, usize> =
            ds.cohorts.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        for (i, p) in ds.points.iter().enumerate() {
            cells[cohort_ix[p.cohort.as_str()] * nc + p.label].push(i);
        }
        let mut names = Vec::with_capacity(cells.len());
        for c in &ds.cohorts {
            for k in 0..nc {
                names.push(format!("cohort={c},class={k}"));
            }
        }
        for (cell, name) in cells.iter_mut().zip(&names) {
            let mut r = rng::stream(seed, &format!("strata:{name}"));
            cell.shuffle(&mut r);
        }
        Strata { cells, names }
    }
}

/// Distributes disjoint subsets of `global` to the institutions of `plan`.
pub fn partition(global: &GlobalDataset, plan: &PartitionPlan) -> Result<Vec<InstitutionDataset>> {
    validate_plan(global, plan)?;
    let nc = global.num_classes;
    let nco = global.cohorts.len();
    let per = plan.points_per_institution;
    let needed = per * plan.institutions.len();
    if needed > global.len() {
        return Err(Error::Partition(format!(
            "{} institutions x {per} points need {needed}, dataset has {}",
            plan.institutions.len(),
            global.len()
        )));
    }
    let strata = Strata::new(global, plan.seed);
    let mut cursor = vec![0usize; strata.cells.len()];
    let cohort_names = global.cohorts.clone();
    let class_names: Vec<String> = (0..nc).map(|k| k.to_string()).collect();
    let global_cohort = global.cohort_fractions();
    let global_class = global.class_fractions();

    let mut iid_pool: Vec<usize> = (0..global.len()).collect();
    iid_pool.shuffle(&mut rng::stream(plan.seed, "partition:iid"));
    let mut iid_cursor = 0;

    let mut out = Vec::with_capacity(plan.institutions.len());
    for inst in &plan.institutions {
        let chosen: Vec<usize> = match plan.heterogeneity {
            Heterogeneity::Iid => {
                let s = iid_pool[iid_cursor..iid_cursor + per].to_vec();
                iid_cursor += per;
                s
            }
            het => {
                let fr = &plan.category_fractions[&inst.category];
                let (cohort_w, class_w) = match het {
                    Heterogeneity::TypeBased => (fr.clone(), global_class.clone()),
                    _ => (global_cohort.clone(), fr.clone()),
                };
                let rows = largest_remainder(per, &cohort_w, &cohort_names);
                let cols = largest_remainder(per, &class_w, &class_names);
                let table = joint_allocation(&rows, &cols);
                let mut s = Vec::with_capacity(per);
                for c in 0..nco {
                    for k in 0..nc {
                        let cell = c * nc + k;
                        let want = table[c][k];
                        let have = strata.cells[cell].len() - cursor[cell];
                        if want > have {
                            return Err(Error::Partition(format!(
                                "institution {}: stratum {} is short by {} points",
                                inst.id,
                                strata.names[cell],
                                want - have
                            )));
                        }
                        s.extend_from_slice(&strata.cells[cell][cursor[cell]..cursor[cell] + want]);
                        cursor[cell] += want;
                    }
                }
                s
            }
        };
        out.push(split_institution(global, inst, &chosen, plan)?);
    }
    Ok(out)
}

fn validate_plan(global: &GlobalDataset, plan: &PartitionPlan) -> Result<()> {
    if plan.institutions.is_empty() {
        return Err(Error::Config("partition plan has no institutions".into()));
    }
    if plan.points_per_institution < 2 {
        return Err(Error::Config("points_per_institution must be at least 2".into()));
    }
    if !(plan.val_fraction > 0.0 && plan.val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {} outside (0, 1)", plan.val_fraction)));
    }
    let universe = global.modalities();
    let mut ids = BTreeSet::new();
    for inst in &plan.institutions {
        if !ids.insert(inst.id) {
            return Err(Error::Config(format!("duplicate institution id {}", inst.id)));
        }
        if !inst.combination.is_subset_of(&universe) {
            return Err(Error::Config(format!(
                "institution {} holds {} which the dataset lacks",
                inst.id, inst.combination
            )));
        }
    }
    if plan.heterogeneity != Heterogeneity::Iid {
        let width = match plan.heterogeneity {
            Heterogeneity::TypeBased => global.cohorts.len(),
            _ => global.num_classes,
        };
        for inst in &plan.institutions {
            let fr = plan.category_fractions.get(&inst.category).ok_or_else(|| {
                Error::Config(format!("no category_fractions for category {}", inst.category))
            })?;
            if fr.len() != width {
                return Err(Error::Config(format!(
                    "category_fractions[{}] has {} entries, expected {width}",
                    inst.category,
                    fr.len()
                )));
            }
            let s: f64 = fr.iter().sum();
            if fr.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "category_fractions[{}] must be non-negative and sum to 1 (sum {s})",
                    inst.category
                )));
            }
        }
    }
    Ok(())
}

fn split_institution(
    global: &GlobalDataset,
    inst: &InstitutionSpec,
    chosen: &[usize],
    plan: &PartitionPlan,
) -> Result<InstitutionDataset> {
    let nc = global.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); nc];
    for &i in chosen {
        by_class[global.points[i].label].push(i);
    }
    let mut r = rng::stream(plan.seed, &format!("split:{}", inst.id));
    for v in &mut by_class {
        v.sort_unstable();
        v.shuffle(&mut r);
    }
    let n = chosen.len();
    let val_total = ((plan.val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let sizes: Vec<f64> = by_class.iter().map(|v| v.len() as f64).collect();
    let class_names: Vec<String> = (0..nc).map(|k| k.to_string()).collect();
    let val_quota = largest_remainder(val_total, &sizes, &class_names);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (v, q) in by_class.iter().zip(val_quota) {
        for (j, &i) in v.iter().enumerate() {
            let p = global.points[i].restricted(&inst.combination)?;
            if j < q {
                val.push(p);
            } else {
                train.push(p);
            }
        }
    }
    train.shuffle(&mut r);
    val.shuffle(&mut r);
    Ok(InstitutionDataset {
        institution_id: inst.id,
        category: inst.category,
        combination: inst.combination.clone(),
        train,
        val,
    })
}

/// Uniform mini-batch without replacement from the training split.
pub fn sample_minibatch<'a, R: Rng + ?Sized>(
    ds: &'a InstitutionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a Datapoint>> {
    if batch_size == 0 || batch_size > ds.train.len() {
        return Err(Error::Validation(format!(
            "batch size {batch_size} invalid for {} training points",
            ds.train.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, ds.train.len(), batch_size)
        .into_iter()
        .map(|i| &ds.train[i])
        .collect())
}
