//! `mmfl`: generate data, partition it, train federated runs, evaluate
//! checkpoints and run experiment grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmfl_core::config::{generate_to, run_grid, ExperimentConfig, GridConfig, Roster};
use mmfl_core::harness::{self, best_round, evaluate_net, export_metrics, rho_distribution, ModelSnapshot};
use mmfl_core::{run_experiment, Error, ErrorClass, Heterogeneity, MethodMode, ModalityCombination, Result};
use serde::Serialize;

const CONFIG_HELP: &str = "\
CONFIG FILE (JSON, every field optional, defaults shown)
  num_classes            3          2 (stages I/II) or 3 (stages I/II/III)
  data                   synthetic  {\"kind\": \"synthetic\", ...} or {\"kind\": \"csv\", \"manifest\": PATH}
    modalities           mrna 64, image 150, clinical 16 dims; signal 1, noise 1
    cohorts / counts     BRCA, LUSC, LIHC with the built-in stage counts times `scale`
    scale                2
    informative_fraction 0.25       share of each modality's dims carrying a cohort's class signal
    cohort_shift         0.5        std of the per-cohort mean offset
    seed                 experiment seed
  arch
    encoder_widths       mrna [32,16], image [64,16], clinical [16,8]
    classifier_hidden    [32]
    mrna_depth           none       small | medium | large (reduced-width presets)
    mrna_width_divisor   256
  partition
    heterogeneity        type_based iid | type_based | class_based
    roster               table21    table21 | nine | {\"custom\": [{id, combination, category}]}
    category_fractions   preset     {category: [fractions]}
    points_per_institution 50
    val_fraction         0.2
  test_fraction          0.15       held out before partitioning
  mode                   dgb-pcw    cm-fl | cm-fl-dgb | dgb-pcw | um-fl
  rounds                 100        global rounds T
  local_steps            20         local SGD steps K per round
  eta0                   1e-4       initial learning rate
  decay                  0.99       per-round learning-rate decay
  tau                    1          client-weight softmax temperature
  batch_size             16
  seed                   0
  signed_dogr            false      zero the ratio of groups whose validation loss rose
  out_dir                out
  run_id                 <mode>_<heterogeneity>_seed<seed>

EXIT STATUS
  0 success, 1 configuration error, 2 data error, 3 runtime error";

#[derive(Parser)]
#[command(name = "mmfl", version, about = "Multi-modal federated learning simulator", after_long_help = CONFIG_HELP)]
struct Cli {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV files plus a manifest.
    Generate {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory for the CSV files.
        #[arg(long, default_value = "out/data")]
        data_dir: PathBuf,
    },
    /// Write the institution partition (point ids per split) as JSON.
    Partition {
        #[command(flatten)]
        overrides: Overrides,
        /// Output file.
        #[arg(long, default_value = "out/partition.json")]
        file: PathBuf,
    },
    /// Run a federated experiment and export its metrics.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a run's final global models on its test split.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a (mode x heterogeneity x seed) grid and write a comparison table.
    Grid {
        /// Grid JSON: {"base": {...}, "modes": [...], "heterogeneities": [...], "seeds": [...]}.
        #[arg(long)]
        grid: PathBuf,
        /// Directory for comparison.csv, rho.csv and per-run exports.
        #[arg(long, default_value = "out/grid")]
        out: PathBuf,
    },
}

/// Flags overriding config-file fields.
#[derive(Args, Default)]
struct Overrides {
    /// Method: cm-fl | cm-fl-dgb | dgb-pcw | um-fl [default: dgb-pcw]
    #[arg(long)]
    mode: Option<String>,
    /// Global rounds T [default: 100]
    #[arg(long)]
    rounds: Option<usize>,
    /// Local SGD steps K per round [default: 20]
    #[arg(long)]
    local_steps: Option<usize>,
    /// Initial learning rate [default: 1e-4]
    #[arg(long)]
    eta0: Option<f64>,
    /// Per-round learning-rate decay [default: 0.99]
    #[arg(long)]
    decay: Option<f64>,
    /// Client-weight softmax temperature [default: 1]
    #[arg(long)]
    tau: Option<f64>,
    /// Mini-batch size [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name under the output directory
    #[arg(long)]
    run_id: Option<String>,
    /// iid | type_based | class_based [default: type_based]
    #[arg(long)]
    heterogeneity: Option<String>,
    /// 2 or 3 [default: 3]
    #[arg(long)]
    num_classes: Option<usize>,
    /// Points per institution [default: 50]
    #[arg(long)]
    points_per_institution: Option<usize>,
    /// table21 | nine [default: table21]
    #[arg(long)]
    roster: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<MethodMode>()?;
        }
        if let Some(h) = &self.heterogeneity {
            cfg.partition.heterogeneity = h.parse::<Heterogeneity>()?;
        }
        if let Some(r) = &self.roster {
            cfg.partition.roster = match r.as_str() {
                "table21" => Roster::Table21,
                "nine" => Roster::Nine,
                other => return Err(Error::Config(format!("roster: unknown preset {other:?}"))),
            };
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            rounds => rounds,
            local_steps => local_steps,
            eta0 => eta0,
            decay => decay,
            tau => tau,
            batch_size => batch_size,
            seed => seed,
            out => out_dir,
            num_classes => num_classes,
            points_per_institution => partition.points_per_institution,
        );
        if let Some(id) = &self.run_id {
            cfg.run_id = Some(id.clone());
        }
        Ok(())
    }
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Serialize)]
struct PartitionDump {
    test_ids: Vec<String>,
    institutions: Vec<InstitutionDump>,
}

#[derive(Serialize)]
struct InstitutionDump {
    id: usize,
    combination: String,
    category: usize,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
}

fn cmd_partition(cfg: &ExperimentConfig, file: &Path) -> Result<()> {
    let p = cfg.prepare()?;
    let dump = PartitionDump {
        test_ids: p.test.points.iter().map(|d| d.id.clone()).collect(),
        institutions: p
            .institutions
            .iter()
            .map(|d| InstitutionDump {
                id: d.institution_id,
                combination: d.combination.key(),
                category: d.category,
                train_ids: d.train.iter().map(|x| x.id.clone()).collect(),
                val_ids: d.val.iter().map(|x| x.id.clone()).collect(),
            })
            .collect(),
    };
    write(file, &(serde_json::to_string_pretty(&dump).expect("serialisable") + "\n"))?;
    eprintln!("wrote {}", file.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<()> {
    let run = run_experiment(cfg, threads)?;
    let dir = cfg.run_dir();
    export_metrics(&run, &cfg.to_json(), &dir)?;
    write(
        &dir.join("config.json"),
        &(serde_json::to_string_pretty(&cfg.to_json()).expect("serialisable") + "\n"),
    )?;
    let last = run.records.last().expect("at least one round");
    let best = best_round(&run.records).expect("at least one round");
    println!(
        "run {} mode {} rounds {}: final accuracy {:.4}, best round {} accuracy {:.4}",
        cfg.run_id(),
        run.mode,
        run.records.len(),
        last.global.accuracy,
        best,
        run.records[best].global.accuracy
    );
    Ok(())
}

fn cmd_evaluate(run_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let model_path = run_dir.join("final_model.json");
    let text = fs::read_to_string(&model_path).map_err(|e| io_err(&model_path, e))?;
    let model: ModelSnapshot = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
        path: model_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let prepared = cfg.prepare()?;
    let mut out = String::from("combo_key,accuracy,loss,n_points\n");
    for key in model.classifiers.keys() {
        let net = model.network(&ModalityCombination::from_key(key)?)?;
        let e = evaluate_net(&net, &prepared.test.points)?;
        out.push_str(&format!(
            "{key},{},{},{}\n",
            harness::sig9(e.accuracy),
            harness::sig9(e.mean_loss),
            e.n_points
        ));
    }
    let path = run_dir.join("evaluation.csv");
    write(&path, &out)?;
    print!("{out}");
    Ok(())
}

fn cmd_grid(path: &Path, out: &Path, threads: Option<usize>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let grid = GridConfig::from_json(&text)?;
    let (table, runs) = run_grid(&grid, threads)?;
    let mut rho = String::new();
    for (cfg, run) in grid.expand().iter().zip(&runs) {
        export_metrics(run, &cfg.to_json(), &out.join(cfg.run_id()))?;
        let summary = rho_distribution(run);
        if summary.note.is_none() {
            for line in summary.to_csv().lines().skip(usize::from(!rho.is_empty())) {
                if rho.is_empty() {
                    rho.push_str(&format!("run_id,{line}\n"));
                } else {
                    rho.push_str(&format!("{},{line}\n", cfg.run_id()));
                }
            }
        }
    }
    write(&out.join("comparison.csv"), &table.to_csv())?;
    if !rho.is_empty() {
        write(&out.join("rho.csv"), &rho)?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Generate { overrides, data_dir } => {
            let cfg = load_config(cfg_path, overrides)?;
            let manifest = generate_to(&cfg, data_dir)?;
            eprintln!("wrote {}", manifest.display());
            Ok(())
        }
        Command::Partition { overrides, file } => cmd_partition(&load_config(cfg_path, overrides)?, file),
        Command::Train { overrides } => cmd_train(&load_config(cfg_path, overrides)?, cli.threads),
        Command::Evaluate { run } => cmd_evaluate(run),
        Command::Grid { grid, out } => cmd_grid(grid, out, cli.threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Runtime => 3,
            })
        }
    }
}
