//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any hard criterion fails.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mmfl_core::config::{run_grid, ExperimentConfig, GridConfig, Roster};
use mmfl_core::data::{generate_synthetic, partition, sample_minibatch, InstitutionDataset, PartitionPlan, SyntheticSpec};
use mmfl_core::federation::{initial_gamma, local_train, ClientState, OgPoint, ServerState};
use mmfl_core::harness::{rho_distribution, ComparisonTable};
use mmfl_core::nn::LayoutEntry;
use mmfl_core::rng;
use mmfl_core::*;
use rand::Rng;

enum Verdict {
    Pass(String),
    /// Missed a target that is documented as non-blocking.
    Soft(String),
    Fail(String),
}

use Verdict::*;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn directional_grid() -> GridConfig {
    let path = workspace_root().join("configs/directional.json");
    GridConfig::from_json(&fs::read_to_string(&path).expect("read directional grid")).expect("parse directional grid")
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut r = rng::stream(1, "acceptance:grad");
    let names = ["clinical", "image", "mrna"];
    let mut largest = 0;
    for _ in 0..100 {
        let mask = r.random_range(1..8usize);
        let mut reg = ArchRegistry { encoders: BTreeMap::new(), classifier_hidden: vec![r.random_range(2..6)] };
        let mut picked = Vec::new();
        for (i, n) in names.iter().enumerate() {
            let depth = r.random_range(1..3);
            let widths = (0..depth).map(|_| r.random_range(2..5)).collect();
            reg.encoders.insert(ModalityId::from(*n), EncoderSpec { in_dim: r.random_range(2..7), widths });
            if mask & (1 << i) != 0 {
                picked.push(*n);
            }
        }
        let combo = ModalityCombination::from_names(&picked).unwrap();
        let classes = r.random_range(2..4);
        let mut net = build_network(&combo, &reg, classes, 0).unwrap();
        // random biases too, so no pre-activation sits exactly on a ReLU kink
        let layout = net.layout();
        let values = (0..layout.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        net.load(&ParamVector::new(values, layout).unwrap()).unwrap();
        assert!(net.param_count() <= 500);
        largest = largest.max(net.param_count());
        let n = r.random_range(1..7);
        let feats: Vec<FeatureMap> = (0..n)
            .map(|_| {
                combo
                    .modalities()
                    .iter()
                    .map(|m| {
                        let d = reg.encoders[m].in_dim;
                        (m.clone(), (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
                    })
                    .collect()
            })
            .collect();
        let batch: Vec<(&FeatureMap, usize)> = feats.iter().map(|f| (f, r.random_range(0..classes))).collect();
        let (_, analytic) = net.backward(&batch).unwrap();
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |p| {
                probe.load(p)?;
                probe.mean_loss(&batch)
            },
            &net.flatten(),
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_rel(analytic.values(), numeric.values()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e} over 100 nets (largest {largest} params), {secs:.2}s"),
    )
}

fn aggregation_oracle() -> Verdict {
    let start = Instant::now();
    let names = ["clinical", "image", "mrna"];
    let widths = [3usize, 4, 2];
    let mut r = rng::stream(2, "acceptance:aggregation");
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..15);
        // per institution: membership mask, size, encoder values per modality, classifier values
        let mut inst = Vec::new();
        for _ in 0..n {
            let mask: usize = r.random_range(1..8);
            let size: usize = r.random_range(1..300);
            let enc: Vec<Vec<f64>> =
                widths.iter().map(|w| (0..*w).map(|_| r.random_range(-10.0..10.0)).collect()).collect();
            let k = mask.count_ones() as usize + 1;
            let clf: Vec<f64> = (0..k).map(|_| r.random_range(-10.0..10.0)).collect();
            inst.push((mask, size, enc, clf));
        }
        let reports: Vec<RoundReport> = inst
            .iter()
            .enumerate()
            .map(|(id, (mask, size, enc, clf))| {
                let mut entries = Vec::new();
                let mut vals = Vec::new();
                let mut held = Vec::new();
                for (i, name) in names.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        entries.push(LayoutEntry { group: ModalityId::from(*name).encoder_group(), shape: vec![widths[i]] });
                        vals.extend(&enc[i]);
                        held.push(*name);
                    }
                }
                entries.push(LayoutEntry { group: GroupId::new("classifier"), shape: vec![clf.len()] });
                vals.extend(clf);
                let p = ParamVector::new(vals, ParamLayout::new(entries)).unwrap();
                RoundReport {
                    institution_id: id,
                    combo_key: ModalityCombination::from_names(&held).unwrap().key(),
                    start_params: p.clone(),
                    end_params: p,
                    train_loss: 0.0,
                    val_loss: 0.0,
                    dataset_size: *size,
                }
            })
            .collect();
        let universe: Vec<ModalityId> = names
            .iter()
            .enumerate()
            .filter(|(i, _)| inst.iter().any(|x| x.0 & (1 << i) != 0))
            .map(|(_, m)| ModalityId::from(*m))
            .collect();
        let enc = aggregate_encoders(&reports, &universe).unwrap();
        for (i, name) in names.iter().enumerate() {
            let Some(got) = enc.get(&ModalityId::from(*name)) else { continue };
            let mut num = vec![0.0; widths[i]];
            let mut den = 0.0;
            for (mask, size, e, _) in &inst {
                let a = if mask & (1 << i) != 0 { 1.0 } else { 0.0 };
                den += a * *size as f64;
                for (acc, v) in num.iter_mut().zip(&e[i]) {
                    *acc += a * *size as f64 * v;
                }
            }
            for (g, v) in got.values().iter().zip(&num) {
                worst = worst.max((g - v / den).abs());
            }
        }
        let clf = aggregate_classifiers(&reports).unwrap();
        for (mask_c, _, _, _) in &inst {
            let key = &reports[inst.iter().position(|x| x.0 == *mask_c).unwrap()].combo_key;
            let got = &clf[key];
            let mut num = vec![0.0; got.len()];
            let mut den = 0.0;
            for (mask, size, _, c) in &inst {
                let b = if mask == mask_c { 1.0 } else { 0.0 };
                den += b * *size as f64;
                for (acc, v) in num.iter_mut().zip(c) {
                    *acc += b * *size as f64 * v;
                }
            }
            for (g, v) in got.values().iter().zip(&num) {
                worst = worst.max((g - v / den).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-12 && secs < 5.0, format!("max abs deviation {worst:.2e} over 1000 instances, {secs:.2}s"))
}

fn directional_base(rounds: usize, mode: MethodMode, seed: u64) -> ExperimentConfig {
    let mut cfg = directional_grid().base;
    cfg.rounds = rounds;
    cfg.mode = mode;
    cfg.seed = seed;
    cfg
}

fn gamma_simplex() -> Verdict {
    let start = Instant::now();
    let cfg = directional_base(20, MethodMode::DgbPcw, 1);
    let prepared = cfg.prepare().unwrap();
    let universe = prepared.test.modalities();
    let n = prepared.institutions.len();
    let mut fed =
        Federation::new(prepared.institutions, prepared.registry, cfg.num_classes, universe, cfg.federation_config())
            .unwrap();
    let mut worst = 0.0f64;
    let mut scaled_rounds = 0;
    for t in 0..cfg.rounds {
        let out = fed.round().unwrap();
        // the first two rounds train with unit multipliers while history accrues
        if t < 2 {
            continue;
        }
        scaled_rounds += 1;
        for g in &out.gamma {
            worst = worst.max((g.values().sum::<f64>() - 2.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        n == 21 && scaled_rounds == 18 && worst <= 1e-9 && secs < 120.0,
        format!("{n} institutions, T=20, max |sum - 2| = {worst:.2e}, {secs:.1}s"),
    )
}

fn rho_simplex() -> Verdict {
    // weights from a nine-institution run, where some combinations have one member
    let mut cfg = directional_base(4, MethodMode::DgbPcw, 3);
    cfg.partition.roster = Roster::Nine;
    let prepared = cfg.prepare().unwrap();
    let universe = prepared.test.modalities();
    let mut fed =
        Federation::new(prepared.institutions, prepared.registry, cfg.num_classes, universe, cfg.federation_config())
            .unwrap();
    let mut sum_dev = 0.0f64;
    let mut singles = 0;
    let mut single_ok = true;
    for _ in 0..cfg.rounds {
        let pcw = fed.round().unwrap().pcw.unwrap();
        for w in pcw.weights.values() {
            sum_dev = sum_dev.max((w.values().sum::<f64>() - 1.0).abs());
            if w.len() == 1 {
                singles += 1;
                single_ok &= w.values().all(|v| *v == 1.0);
            }
        }
    }
    let mut r = rng::stream(4, "acceptance:shift");
    let mut shift_dev = 0.0f64;
    for _ in 0..1000 {
        let k = r.random_range(1..8);
        let scores: Vec<f64> = (0..k).map(|_| r.random_range(-20.0..20.0)).collect();
        let c = r.random_range(-1e3..1e3);
        let tau = r.random_range(0.1..4.0);
        let a = softmax_weights(&scores, tau);
        let b = softmax_weights(&scores.iter().map(|s| s + c).collect::<Vec<_>>(), tau);
        for (x, y) in a.iter().zip(&b) {
            shift_dev = shift_dev.max((x - y).abs());
        }
        let one = softmax_weights(&scores[..1], tau);
        single_ok &= one == [1.0];
    }
    check(
        sum_dev <= 1e-9 && single_ok && singles > 0 && shift_dev <= 1e-9,
        format!(
            "max |group sum - 1| = {sum_dev:.2e}, {singles} single-member weights all 1: {single_ok}, shift deviation {shift_dev:.2e}"
        ),
    )
}

fn small_partition(seed: u64, roster: Vec<data::InstitutionSpec>, per: usize) -> (Vec<InstitutionDataset>, ArchRegistry) {
    let mut spec = SyntheticSpec::tcga_like(2, 1, seed).unwrap();
    for s in spec.modalities.values_mut() {
        s.dim = 8;
    }
    let ds = generate_synthetic(&spec).unwrap();
    let plan = PartitionPlan {
        institutions: roster,
        heterogeneity: Heterogeneity::Iid,
        category_fractions: BTreeMap::new(),
        points_per_institution: per,
        val_fraction: 0.2,
        seed,
    };
    let mut reg = ArchRegistry::desk();
    for e in reg.encoders.values_mut() {
        e.in_dim = 8;
    }
    (partition(&ds, &plan).unwrap(), reg)
}

fn full_combo() -> ModalityCombination {
    ModalityCombination::from_names(&["clinical", "image", "mrna"]).unwrap()
}

fn single_client_collapse() -> Verdict {
    let seed = 17;
    let spec = data::InstitutionSpec { id: 1, combination: full_combo(), category: 1 };
    let (parts, reg) = small_partition(seed, vec![spec], 60);
    let cfg = FederationConfig {
        mode: MethodMode::CmFl,
        rounds: 1,
        local_steps: 20,
        batch_size: 8,
        schedule: LrSchedule { eta0: 0.05, decay: 0.99 },
        temperature: 1.0,
        signed_dogr: false,
        seed,
    };
    let universe = full_combo().modalities().to_vec();
    let mut fed = Federation::new(parts.clone(), reg.clone(), 2, universe, cfg.clone()).unwrap();
    let initial = fed.server().params_for(&full_combo()).unwrap();
    fed.round().unwrap();
    let federated = fed.server().params_for(&full_combo()).unwrap();

    // plain SGD on the same data, minibatch stream and initial point
    let mut net = build_network(&full_combo(), &reg, 2, 0).unwrap();
    net.load(&initial).unwrap();
    let mut batches = rng::client_stream(seed, 1);
    let eta = cfg.schedule.eta0;
    let mut params = initial.values().to_vec();
    for _ in 0..20 {
        let batch = sample_minibatch(&parts[0], 8, &mut batches).unwrap();
        let samples: Vec<(&FeatureMap, usize)> = batch.iter().map(|p| (&p.features, p.label)).collect();
        let (_, g) = net.backward(&samples).unwrap();
        for (p, gi) in params.iter_mut().zip(g.values()) {
            *p -= eta * gi;
        }
        net.load(&ParamVector::new(params.clone(), initial.layout().clone()).unwrap()).unwrap();
    }
    let identical = federated.values().iter().zip(&params).all(|(a, b)| a.to_bits() == b.to_bits());
    let moved = initial.values() != federated.values();
    check(identical && moved, format!("{} parameters bit-identical: {identical}", params.len()))
}

fn fedavg_identity() -> Verdict {
    let seed = 23;
    let spec = data::InstitutionSpec { id: 0, combination: full_combo(), category: 1 };
    let (parts, reg) = small_partition(seed, vec![spec], 40);
    let combo = full_combo();
    let universe = combo.modalities().to_vec();
    let mut server = ServerState::init(std::slice::from_ref(&combo), &reg, 2, seed, 1.0).unwrap();
    let mut clients: Vec<ClientState> = (0..5)
        .map(|i| {
            let mut ds = parts[0].clone();
            ds.institution_id = i;
            let mut c = ClientState::new(ds, build_network(&combo, &reg, 2, seed).unwrap(), seed).unwrap();
            c.rng = rng::client_stream(seed, 0);
            c
        })
        .collect();
    let mut worst = 0.0f64;
    for t in 0..5 {
        let eta = 0.05 * 0.99f64.powi(t);
        let mut reports = Vec::new();
        for c in &mut clients {
            c.net.load(&server.params_for(&combo).unwrap()).unwrap();
            c.set_gamma(initial_gamma(&combo)).unwrap();
            reports.push(local_train(c, eta, 20, 8).unwrap());
        }
        server.encoders.extend(aggregate_encoders(&reports, &universe).unwrap());
        server.classifiers.extend(aggregate_classifiers(&reports).unwrap());
        let global = server.params_for(&combo).unwrap();
        for r in &reports {
            for (a, b) in global.values().iter().zip(r.end_params.values()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("5 identical institutions, 5 rounds, max deviation {worst:.2e}"))
}

fn history(points: &[(&str, [(f64, f64); 2])]) -> BTreeMap<String, VecDeque<OgPoint>> {
    points
        .iter()
        .map(|(k, pts)| {
            let h = pts.iter().map(|(o, g)| OgPoint { overfitting: *o, generalization: *g }).collect();
            (k.to_string(), h)
        })
        .collect()
}

fn dogr_cases() -> Verdict {
    let tri = full_combo();
    let same = [(0.1, 0.9), (0.3, 0.7)];
    let h = history(&[("clinical", same), ("image", same), ("mrna", same), ("clinical+image+mrna", same)]);
    let uniform = dogr_coefficients(&h, &tri, false).unwrap();
    let uniform_ok = uniform.len() == 4 && uniform.values().all(|g| *g == 0.5);

    let uni = ModalityCombination::from_names(&["image"]).unwrap();
    let h = history(&[("image", [(0.2, 1.0), (0.5, 0.4)])]);
    let unimodal = dogr_coefficients(&h, &uni, false).unwrap();
    let unimodal_ok = unimodal.values().all(|g| *g == 1.0);

    // encoder ratio from dG = 2, dO = 1 is 4 up to the floor; classifier ratio 1
    let normalized = normalize_dogr(&[4.0, 1.0]);
    let four = federation::dogr_ratio(
        OgPoint { overfitting: 0.0, generalization: 0.0 },
        OgPoint { overfitting: 1.0, generalization: 2.0 },
        false,
    );
    let via_ratios = normalize_dogr(&[four, 1.0]);
    let split_ok = normalized == [1.6, 0.4] && (via_ratios[0] - 1.6).abs() < 1e-11 && (via_ratios[1] - 0.4).abs() < 1e-11;
    check(
        uniform_ok && unimodal_ok && split_ok,
        format!("uniform {:?}, uni-modal {:?}, (4,1) -> {:?}", uniform.values().collect::<Vec<_>>(), unimodal.values().collect::<Vec<_>>(), normalized),
    )
}

struct DirectionalRun {
    table: ComparisonTable,
    runs: Vec<RunResult>,
    elapsed: Duration,
}

fn directional() -> &'static DirectionalRun {
    static RUN: OnceLock<DirectionalRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let (table, runs) = run_grid(&directional_grid(), None).unwrap();
        DirectionalRun { table, runs, elapsed: start.elapsed() }
    })
}

fn method_ordering() -> Verdict {
    let d = directional();
    let median = |m| d.table.get(m, Heterogeneity::TypeBased).unwrap().median;
    let (cm, dp, um) = (median(MethodMode::CmFl), median(MethodMode::DgbPcw), median(MethodMode::UmFl));
    let secs = d.elapsed.as_secs_f64();
    let detail = format!(
        "median best-round accuracy cm-fl {:.2}%, dgb-pcw {:.2}%, um-fl {:.2}% (margin {:+.2} points), {secs:.0}s",
        100.0 * cm,
        100.0 * dp,
        100.0 * um,
        100.0 * (dp - cm)
    );
    if dp >= cm + 0.03 && um >= dp && secs < 900.0 {
        Pass(detail)
    } else if dp > cm && um >= dp && secs < 900.0 {
        Soft(detail)
    } else {
        Fail(detail)
    }
}

fn rho_ordering() -> Verdict {
    let d = directional();
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for run in d.runs.iter().filter(|r| r.mode == MethodMode::DgbPcw) {
        let summary = rho_distribution(run);
        let mut by_combo: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
        for s in &summary.stats {
            by_combo.entry(&s.combo_key).or_default().push((s.category, s.mean));
        }
        let led = by_combo
            .values()
            .filter(|v| {
                let top = v.iter().map(|(_, m)| *m).fold(f64::NEG_INFINITY, f64::max);
                v.iter().any(|(c, m)| *c == 1 && *m == top)
            })
            .count();
        per_seed.push(format!("{led}/{}", by_combo.len()));
        if led == by_combo.len() {
            wins += 1;
        }
    }
    check(wins >= 4, format!("category 1 leads every combination in {wins} of 5 seeds (per seed: {})", per_seed.join(" ")))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    let mut cfg = directional_base(3, MethodMode::DgbPcw, 5);
    cfg.out_dir = dir.path().to_path_buf();
    fs::write(&cfg_path, serde_json::to_string(&cfg.to_json()).unwrap()).unwrap();
    let mut outputs = Vec::new();
    for (threads, run_id) in [(1, "a"), (4, "b"), (2, "c")] {
        let status = Command::new(env!("CARGO_BIN_EXE_mmfl"))
            .args(["--config", cfg_path.to_str().unwrap(), "--threads", &threads.to_string(), "train", "--run-id", run_id])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let run_dir = dir.path().join(run_id);
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&run_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        outputs.push(files);
    }
    let n = outputs[0].len();
    check(
        n >= 4 && outputs.iter().all(|o| o == &outputs[0]),
        format!("{n} CSV files byte-identical across --threads 1, 4 and 2: {}", outputs.iter().all(|o| o == &outputs[0])),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient oracle", gradient_oracle),
        ("aggregation oracle", aggregation_oracle),
        ("gamma simplex", gamma_simplex),
        ("client-weight simplex and collapse", rho_simplex),
        ("single-client collapse", single_client_collapse),
        ("fedavg identity", fedavg_identity),
        ("hand-computed DOGR cases", dogr_cases),
        ("directional method ordering", method_ordering),
        ("client-weight ordering", rho_ordering),
        ("determinism across thread counts", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|s| label.contains(s.as_str())) {
            continue;
        }
        let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match verdict {
            Pass(d) => println!("{label}: PASS ({d})"),
            Soft(d) => println!("{label}: SOFT FAIL ({d})"),
            Fail(d) => {
                failed += 1;
                println!("{label}: FAIL ({d})")
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
