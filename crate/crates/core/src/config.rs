//! JSON experiment configuration and the end-to-end pipeline built from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, generate_synthetic, load_csv, partition, preset_fractions, roster_21, roster_9, GlobalDataset,
    Heterogeneity, InstitutionDataset, InstitutionSpec, ModalitySignal, PartitionPlan, SyntheticSpec,
    DEFAULT_COHORTS, STAGE_COUNTS,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, FederationConfig, LrSchedule, MethodMode};
use crate::harness::{compare_methods, export_metrics, ComparisonTable, GridCell, RunResult};
use crate::model::{ArchRegistry, EncoderSpec, ModalityCombination, ModalityId, MrnaDepth};

fn default_modalities() -> BTreeMap<String, ModalitySignal> {
    [
        ("mrna", ModalitySignal { dim: 64, signal: 1.0, noise: 1.0 }),
        ("image", ModalitySignal { dim: 150, signal: 1.0, noise: 1.0 }),
        ("clinical", ModalitySignal { dim: 16, signal: 1.0, noise: 1.0 }),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub modalities: BTreeMap<String, ModalitySignal>,
    /// Cohort names; defaults to the three TCGA-like cohorts.
    pub cohorts: Option<Vec<String>>,
    /// `counts[cohort][class]`; defaults to the built-in stage counts times `scale`.
    pub counts: Option<Vec<Vec<usize>>>,
    pub scale: usize,
    pub informative_fraction: f64,
    pub cohort_shift: f64,
    /// Generator seed; the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            modalities: default_modalities(),
            cohorts: None,
            counts: None,
            scale: 2,
            informative_fraction: 0.25,
            cohort_shift: 0.5,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv { manifest: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Encoder widths per modality; input widths come from the data.
    pub encoder_widths: BTreeMap<String, Vec<usize>>,
    pub classifier_hidden: Vec<usize>,
    /// Replace the mRNA widths with a reduced depth preset.
    pub mrna_depth: Option<MrnaDepth>,
    pub mrna_width_divisor: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let desk = ArchRegistry::desk();
        ArchConfig {
            encoder_widths: desk.encoders.into_iter().map(|(m, e)| (m.to_string(), e.widths)).collect(),
            classifier_hidden: desk.classifier_hidden,
            mrna_depth: None,
            mrna_width_divisor: 256,
        }
    }
}

impl ArchConfig {
    pub fn registry(&self, dims: &BTreeMap<ModalityId, usize>) -> Result<ArchRegistry> {
        let mut encoders = BTreeMap::new();
        for (m, d) in dims {
            let widths = match (m.as_str(), self.mrna_depth) {
                ("mrna", Some(depth)) => depth.reduced_widths(self.mrna_width_divisor, 4),
                _ => self
                    .encoder_widths
                    .get(m.as_str())
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("arch.encoder_widths has no entry for modality {m}")))?,
            };
            encoders.insert(m.clone(), EncoderSpec { in_dim: *d, widths });
        }
        let reg = ArchRegistry {
            encoders,
            classifier_hidden: self.classifier_hidden.clone(),
        };
        reg.validate(&dims.keys().cloned().collect::<Vec<_>>())?;
        Ok(reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Roster {
    /// 21 institutions, three per modality combination.
    Table21,
    /// Three uni-modal, three bi-modal and three tri-modal institutions.
    Nine,
    Custom(Vec<InstitutionSpec>),
}

impl Roster {
    pub fn institutions(&self) -> Vec<InstitutionSpec> {
        match self {
            Roster::Table21 => roster_21(),
            Roster::Nine => roster_9(),
            Roster::Custom(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub heterogeneity: Heterogeneity,
    pub roster: Roster,
    /// Overrides the preset fractions; keyed by category.
    pub category_fractions: Option<BTreeMap<usize, Vec<f64>>>,
    pub points_per_institution: usize,
    pub val_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            heterogeneity: Heterogeneity::TypeBased,
            roster: Roster::Table21,
            category_fractions: None,
            points_per_institution: 50,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub data: DataSource,
    pub arch: ArchConfig,
    pub partition: PartitionConfig,
    /// Share of the global dataset withheld for testing before partitioning.
    pub test_fraction: f64,
    pub mode: MethodMode,
    pub rounds: usize,
    pub local_steps: usize,
    pub eta0: f64,
    pub decay: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub signed_dogr: bool,
    pub out_dir: PathBuf,
    /// Run directory name under `out_dir`; derived from mode and seed when absent.
    pub run_id: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_classes: 3,
            data: DataSource::default(),
            arch: ArchConfig::default(),
            partition: PartitionConfig::default(),
            test_fraction: 0.15,
            mode: MethodMode::DgbPcw,
            rounds: 100,
            local_steps: 20,
            eta0: 1e-4,
            decay: 0.99,
            tau: 1.0,
            batch_size: 16,
            seed: 0,
            signed_dogr: false,
            out_dir: PathBuf::from("out"),
            run_id: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Checks every field that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.num_classes) {
            return Err(field("num_classes", format!("must be 2 or 3, got {}", self.num_classes)));
        }
        if self.rounds == 0 {
            return Err(field("rounds", "must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(field("local_steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be at least 1"));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(field("eta0", format!("must be positive, got {}", self.eta0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(field("decay", format!("must lie in (0, 1], got {}", self.decay)));
        }
        if !self.tau.is_finite() {
            return Err(field("tau", "must be finite"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(field("test_fraction", format!("must lie in (0, 1), got {}", self.test_fraction)));
        }
        let p = &self.partition;
        if p.points_per_institution < 2 {
            return Err(field("partition.points_per_institution", "must be at least 2"));
        }
        if !(p.val_fraction > 0.0 && p.val_fraction < 1.0) {
            return Err(field("partition.val_fraction", format!("must lie in (0, 1), got {}", p.val_fraction)));
        }
        if let Some(fr) = &p.category_fractions {
            for (cat, row) in fr {
                let s: f64 = row.iter().sum();
                if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                    return Err(field(
                        &format!("partition.category_fractions[{cat}]"),
                        format!("must be non-negative and sum to 1, sums to {s}"),
                    ));
                }
            }
        }
        if let Roster::Custom(v) = &p.roster {
            if v.is_empty() {
                return Err(field("partition.roster", "custom roster is empty"));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.scale == 0 {
                return Err(field("data.scale", "must be at least 1"));
            }
            if !(s.informative_fraction > 0.0 && s.informative_fraction <= 1.0) {
                return Err(field("data.informative_fraction", "must lie in (0, 1]"));
            }
            for (m, sig) in &s.modalities {
                if sig.dim == 0 {
                    return Err(field(&format!("data.modalities.{m}.dim"), "must be positive"));
                }
                if !(sig.noise >= 0.0) {
                    return Err(field(&format!("data.modalities.{m}.noise"), "must be non-negative"));
                }
            }
        }
        if self.arch.mrna_width_divisor == 0 {
            return Err(field("arch.mrna_width_divisor", "must be positive"));
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}_{}_seed{}", self.mode, self.partition.heterogeneity.as_str(), self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            mode: self.mode,
            rounds: self.rounds,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                eta0: self.eta0,
                decay: self.decay,
            },
            temperature: self.tau,
            signed_dogr: self.signed_dogr,
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>> {
        let DataSource::Synthetic(s) = &self.data else {
            return Ok(None);
        };
        let cohorts = s
            .cohorts
            .clone()
            .unwrap_or_else(|| DEFAULT_COHORTS.iter().map(|c| c.to_string()).collect());
        let counts = match &s.counts {
            Some(c) => c.clone(),
            None => {
                if cohorts.len() != STAGE_COUNTS.len() {
                    return Err(field("data.counts", "required when cohorts differ from the default three"));
                }
                STAGE_COUNTS
                    .iter()
                    .map(|row| row[..self.num_classes].iter().map(|c| c * s.scale).collect())
                    .collect()
            }
        };
        let spec = SyntheticSpec {
            modalities: s.modalities.iter().map(|(k, v)| (ModalityId::from(k.as_str()), v.clone())).collect(),
            cohorts,
            num_classes: self.num_classes,
            counts,
            informative_fraction: s.informative_fraction,
            cohort_shift: s.cohort_shift,
            seed: s.seed.unwrap_or(self.seed),
        };
        spec.validate().map_err(|e| field("data", e))?;
        Ok(Some(spec))
    }

    /// Generates or loads the global dataset.
    pub fn load_dataset(&self) -> Result<GlobalDataset> {
        let mut ds = match (&self.data, self.synthetic_spec()?) {
            (_, Some(spec)) => generate_synthetic(&spec)?,
            (DataSource::Csv { manifest }, None) => {
                let loaded = load_csv(manifest)?;
                if loaded.dataset.num_classes != self.num_classes {
                    return Err(field(
                        "num_classes",
                        format!("config says {}, dataset manifest says {}", self.num_classes, loaded.dataset.num_classes),
                    ));
                }
                loaded.dataset
            }
            (DataSource::Synthetic(_), None) => unreachable!("synthetic source always yields a spec"),
        };
        // presets list cohorts in the default order
        let mut sorted_default: Vec<String> = DEFAULT_COHORTS.iter().map(|c| c.to_string()).collect();
        sorted_default.sort();
        let mut have = ds.cohorts.clone();
        have.sort();
        if have == sorted_default {
            ds.cohorts = DEFAULT_COHORTS.iter().map(|c| c.to_string()).collect();
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn partition_plan(&self, dataset: &GlobalDataset) -> Result<PartitionPlan> {
        let p = &self.partition;
        let mut institutions = p.roster.institutions();
        if self.mode == MethodMode::UmFl {
            let full = ModalityCombination::new(dataset.modalities())?;
            for i in &mut institutions {
                i.combination = full.clone();
            }
        }
        let category_fractions = match (&p.category_fractions, p.heterogeneity) {
            (Some(f), _) => f.clone(),
            (None, Heterogeneity::TypeBased) if dataset.cohorts != DEFAULT_COHORTS.map(String::from) => {
                return Err(field(
                    "partition.category_fractions",
                    "required for type-based partitioning of non-default cohorts",
                ))
            }
            (None, h) => preset_fractions(h, self.num_classes)?,
        };
        Ok(PartitionPlan {
            institutions,
            heterogeneity: p.heterogeneity,
            category_fractions,
            points_per_institution: p.points_per_institution,
            val_fraction: p.val_fraction,
            seed: self.seed,
        })
    }

    /// Loads data, withholds the test split and partitions the rest.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let global = self.load_dataset()?;
        let registry = self.arch.registry(&global.modality_dims)?;
        let (pool, test) = global.split_holdout(self.test_fraction, self.seed)?;
        let plan = self.partition_plan(&global)?;
        let institutions = partition(&pool, &plan)?;
        Ok(Prepared {
            test,
            institutions,
            registry,
            plan,
        })
    }
}

/// Inputs of a federated run, ready to train.
pub struct Prepared {
    pub test: GlobalDataset,
    pub institutions: Vec<InstitutionDataset>,
    pub registry: ArchRegistry,
    pub plan: PartitionPlan,
}

pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<RunResult> {
    let prepared = cfg.prepare()?;
    run_federation(
        prepared.institutions,
        &prepared.test,
        &prepared.registry,
        &cfg.federation_config(),
        threads,
    )
}

/// Runs the experiment and writes its metrics under [`ExperimentConfig::run_dir`].
pub fn run_and_export(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<(RunResult, PathBuf)> {
    let run = run_experiment(cfg, threads)?;
    let dir = cfg.run_dir();
    export_metrics(&run, &cfg.to_json(), &dir)?;
    Ok((run, dir))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub modes: Vec<MethodMode>,
    pub heterogeneities: Vec<Heterogeneity>,
    pub seeds: Vec<u64>,
}

impl GridConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: GridConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.heterogeneities.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid: modes, heterogeneities and seeds must be non-empty".into()));
        }
        self.base.validate()
    }

    /// Cell configurations in (mode, heterogeneity, seed) order.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &h in &self.heterogeneities {
                for &seed in &self.seeds {
                    let mut c = self.base.clone();
                    c.mode = mode;
                    c.partition.heterogeneity = h;
                    c.seed = seed;
                    c.run_id = None;
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Runs every grid cell (cells in parallel, each run single-threaded inside)
/// and summarises best-round accuracies.
pub fn run_grid(grid: &GridConfig, threads: Option<usize>) -> Result<(ComparisonTable, Vec<RunResult>)> {
    grid.validate()?;
    let cfgs = grid.expand();
    let work = || -> Result<Vec<RunResult>> { cfgs.par_iter().map(|c| run_experiment(c, Some(1))).collect() };
    let runs = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let mut cells: Vec<GridCell> = Vec::new();
    for (c, r) in cfgs.iter().zip(&runs) {
        let acc = r
            .best_accuracy()
            .ok_or_else(|| Error::Evaluation("run recorded no rounds".into()))?;
        match cells
            .iter_mut()
            .find(|g| g.mode == c.mode && g.heterogeneity == c.partition.heterogeneity)
        {
            Some(g) => g.accuracies.push(acc),
            None => cells.push(GridCell {
                mode: c.mode,
                heterogeneity: c.partition.heterogeneity,
                accuracies: vec![acc],
            }),
        }
    }
    Ok((compare_methods(&cells)?, runs))
}

/// Writes a dataset to CSV files for the configuration's data source.
pub fn generate_to(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    data::write_csv(&cfg.load_dataset()?, dir)
}
