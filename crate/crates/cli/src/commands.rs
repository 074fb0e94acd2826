use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use geonovel::data::{generate_synthetic, read_embeddings, write_embeddings, EmbeddingDataset};
use geonovel::encoder::{train, EncoderModel};
use geonovel::metrics::compute_metrics;
use geonovel::objective::Domain;
use geonovel::pipeline::{discover, normalize_rows, Stage};
use geonovel::proxy::{assign_base_proxies_with, minimize_energy, BaseSelection, EnergyMinConfig, ProxySet};
use geonovel::spectral::{bench_estimators, estimate_class_count, EigenSolver, Level, SpectralConfig};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Stage {
        stage: &'static str,
        input: String,
        source: geonovel::Error,
    },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Stage { stage, input, source } => write!(f, "{stage} ({input}): {source}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn at<T>(stage: &'static str, input: impl fmt::Display, r: geonovel::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Stage {
        stage,
        input: input.to_string(),
        source,
    })
}

fn io_err(stage: &'static str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Stage {
        stage,
        input: path.display().to_string(),
        source: geonovel::Error::Io(e),
    }
}

#[derive(Parser, Debug)]
#[command(name = "geonovel", version, about = "Novel-class discovery on the hypersphere")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Auto,
    Dense,
    Subspace,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectionArg {
    Random,
    MaxMinSpread,
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected k_min,k_max")?;
    let a = a.trim().parse().map_err(|_| format!("bad k_min {a:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad k_max {b:?}"))?;
    Ok((a, b))
}

fn parse_id_list(s: &str) -> std::result::Result<BTreeSet<usize>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| format!("bad class id {t:?}")))
        .collect()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark: base.gcpe, unlabeled.gcpe and truth.csv.
    Synth {
        /// Run configuration (JSON); its `synth` section is used [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (required)
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Minimize the Riesz energy of a proxy set and reserve base anchors.
    Proxies {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Riesz exponent (0 selects the logarithmic kernel)
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        #[arg(long, default_value_t = 5)]
        num_base: usize,
        #[arg(long, value_enum, default_value_t = SelectionArg::Random)]
        base_selection: SelectionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
        /// Proxy file to write (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder on base and unlabeled features against a proxy set.
    Train {
        /// Labeled base split, .gcpe or .csv (required)
        #[arg(long)]
        base: PathBuf,
        /// Unlabeled split, .gcpe or .csv (required)
        #[arg(long)]
        unlabeled: PathBuf,
        /// Proxy file with base anchors (required)
        #[arg(long)]
        proxies: PathBuf,
        /// Run configuration (JSON); its `train` section is used [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file to write (required)
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss CSV [default: not written]
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Estimate the class count from the eigengap of the normalized Laplacian.
    Estimate {
        /// Embeddings or raw features; rows are normalized first (required)
        #[arg(long)]
        embeddings: PathBuf,
        /// Encode the rows with this model first [default: use rows as given]
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LevelArg::Coarse)]
        level: LevelArg,
        /// Gap window k_min,k_max [default: 2,min(100, N/10)]
        #[arg(long, value_parser = parse_window)]
        window: Option<(usize, usize)>,
        #[arg(long, default_value_t = 10)]
        neighbors: usize,
        #[arg(long, default_value_t = 2048)]
        max_points: usize,
        #[arg(long, value_enum, default_value_t = SolverArg::Auto)]
        solver: SolverArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of index,eigenvalue,gap [default: not written]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Encode unlabeled features and cluster them.
    Discover {
        /// Trained model file (required)
        #[arg(long)]
        model: PathBuf,
        /// Unlabeled split, .gcpe or .csv (required)
        #[arg(long)]
        unlabeled: PathBuf,
        /// Cluster count [default: estimated]
        #[arg(long)]
        k: Option<usize>,
        /// Run configuration (JSON); its `discover` section is used [default: built-in defaults]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed [default: from config, 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Assignment CSV to write (required)
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted clusters against true labels.
    Eval {
        /// CSV with header instance_id,predicted_label (required)
        #[arg(long)]
        pred: PathBuf,
        /// CSV with header instance_id,label (required)
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated base class ids (required)
        #[arg(long, value_parser = parse_id_list)]
        base_classes: BTreeSet<usize>,
        /// Metrics JSON file [default: stdout only]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the spectral estimator against the sweep-k elbow baseline.
    BenchEstimate {
        /// Embeddings or raw features; rows are normalized first (required)
        #[arg(long)]
        embeddings: PathBuf,
        /// Encode the rows with this model first [default: use rows as given]
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        k_max: usize,
        #[arg(long, default_value_t = 10)]
        neighbors: usize,
        #[arg(long, default_value_t = 2048)]
        max_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs one subcommand and returns the report it prints.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth { config, out_dir } => synth(config.as_deref(), &out_dir),
        Command::Proxies {
            dim,
            count,
            s,
            num_base,
            base_selection,
            seed,
            restarts,
            max_iters,
            out,
        } => {
            let energy = EnergyMinConfig {
                restarts,
                max_iters,
                ..Default::default()
            };
            let selection = match base_selection {
                SelectionArg::Random => BaseSelection::Random,
                SelectionArg::MaxMinSpread => BaseSelection::MaxMinSpread,
            };
            proxies(dim, count, s, num_base, selection, seed, &energy, &out)
        }
        Command::Train {
            base,
            unlabeled,
            proxies,
            config,
            out,
            trace,
        } => train_cmd(&base, &unlabeled, &proxies, config.as_deref(), &out, trace.as_deref()),
        Command::Estimate {
            embeddings,
            model,
            level,
            window,
            neighbors,
            max_points,
            solver,
            seed,
            report,
        } => {
            let config = SpectralConfig {
                window,
                level: match level {
                    LevelArg::Coarse => Level::Coarse,
                    LevelArg::Fine => Level::Fine,
                },
                neighbor_count: neighbors,
                max_points,
                seed,
                solver: match solver {
                    SolverArg::Auto => EigenSolver::Auto,
                    SolverArg::Dense => EigenSolver::Dense,
                    SolverArg::Subspace => EigenSolver::Subspace,
                },
            };
            estimate(&embeddings, model.as_deref(), &config, report.as_deref())
        }
        Command::Discover {
            model,
            unlabeled,
            k,
            config,
            seed,
            out,
        } => discover_cmd(&model, &unlabeled, k, config.as_deref(), seed, &out),
        Command::Eval {
            pred,
            truth,
            base_classes,
            out,
        } => eval(&pred, &truth, &base_classes, out.as_deref()),
        Command::BenchEstimate {
            embeddings,
            model,
            k_max,
            neighbors,
            max_points,
            seed,
        } => {
            let config = SpectralConfig {
                neighbor_count: neighbors,
                max_points,
                seed,
                ..Default::default()
            };
            bench(&embeddings, model.as_deref(), k_max, &config)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| io_err("config", path, e))?;
    RunConfig::from_json(&text).map_err(|e| CliError::Usage(format!("config ({}): {e}", path.display())))
}

fn write_file(stage: &'static str, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(stage, path, e))
}

fn json_text(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn read_dataset(stage: &'static str, path: &Path) -> Result<EmbeddingDataset> {
    let ds = at(stage, path.display(), read_embeddings(path))?;
    at(stage, path.display(), ds.validate())?;
    Ok(ds)
}

fn read_model(stage: &'static str, path: &Path) -> Result<EncoderModel> {
    at(stage, path.display(), EncoderModel::read(path))
}

/// Unit rows to estimate on: encoded directions when a model is given, else normalized rows.
fn directions(stage: &'static str, embeddings: &Path, model: Option<&Path>) -> Result<DMatrix<f64>> {
    let ds = read_dataset(stage, embeddings)?;
    match model {
        Some(m) => {
            let model = read_model(stage, m)?;
            at(stage, embeddings.display(), model.encode_directions(&ds.features))
        }
        None => at(stage, embeddings.display(), normalize_rows(&ds.features)),
    }
}

fn synth(config: Option<&Path>, out_dir: &Path) -> Result<String> {
    let config = load_config(config)?.synth;
    let bench = at("synth", "config", generate_synthetic(&config))?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err("synth", out_dir, e))?;
    let base = out_dir.join("base.gcpe");
    let unl = out_dir.join("unlabeled.gcpe");
    at("synth", base.display(), write_embeddings(&bench.base, &base))?;
    at("synth", unl.display(), write_embeddings(&bench.unlabeled, &unl))?;
    let truth = out_dir.join("truth.csv");
    write_file("synth", &truth, labels_csv("label", &bench.truth))?;
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in &bench.truth {
        *sizes.entry(t).or_default() += 1;
    }
    Ok(json_text(&json!({
        "base_instances": bench.base.len(),
        "unlabeled_instances": bench.unlabeled.len(),
        "feature_dim": bench.base.dim(),
        "base_classes": bench.base.base_classes,
        "unlabeled_class_sizes": sizes,
        "outputs": [base.display().to_string(), unl.display().to_string(), truth.display().to_string()],
    })))
}

#[allow(clippy::too_many_arguments)]
fn proxies(
    dim: usize,
    count: usize,
    s: f64,
    num_base: usize,
    selection: BaseSelection,
    seed: u64,
    energy: &EnergyMinConfig,
    out: &Path,
) -> Result<String> {
    let set = at("proxies", "flags", minimize_energy(count, dim, s, energy, seed))?;
    let set = at(
        "proxies",
        "flags",
        assign_base_proxies_with(&set, num_base, geonovel::rng::derive_seed(seed, u64::MAX), selection),
    )?;
    at("proxies", out.display(), set.write(out))?;
    let (min, mean, max) = set.distance_stats();
    Ok(json_text(&json!({
        "count": set.count(),
        "dim": set.dim(),
        "s": set.s,
        "energy": set.energy,
        "converged": set.converged,
        "initial_energies": set.initial_energies,
        "geodesic_min": min,
        "geodesic_mean": mean,
        "geodesic_max": max,
        "base_indices": set.base_indices,
    })))
}

fn train_cmd(base: &Path, unlabeled: &Path, proxies: &Path, config: Option<&Path>, out: &Path, trace: Option<&Path>) -> Result<String> {
    let config = load_config(config)?.train;
    let base_ds = read_dataset("train", base)?;
    let unl_ds = read_dataset("train", unlabeled)?;
    let proxy_set = at("train", proxies.display(), ProxySet::read(proxies))?;
    let labels = base_ds.labels.clone().ok_or_else(|| CliError::Stage {
        stage: "train",
        input: base.display().to_string(),
        source: geonovel::Error::Data("base split carries no labels".into()),
    })?;
    if base_ds.domain != Domain::Base || unl_ds.domain != Domain::Unlabeled {
        return Err(CliError::Stage {
            stage: "train",
            input: format!("{} / {}", base.display(), unlabeled.display()),
            source: geonovel::Error::Data("expected a base split and an unlabeled split".into()),
        });
    }
    if base_ds.dim() != unl_ds.dim() {
        return Err(CliError::Stage {
            stage: "train",
            input: unlabeled.display().to_string(),
            source: geonovel::Error::Shape {
                expected: base_ds.dim(),
                actual: unl_ds.dim(),
            },
        });
    }
    let model = at("train", "config", config.init_model(base_ds.dim(), proxy_set.dim()))?;
    let outcome = at(
        "train",
        base.display(),
        train(&model, &base_ds.features, &labels, &unl_ds.features, &proxy_set, &config),
    )?;
    at("train", out.display(), outcome.model.write(out))?;
    if let Some(path) = trace {
        let mut text = String::from("iteration,total,base,dispersion,structuring\n");
        for (i, v) in outcome.trace.iter().enumerate() {
            text.push_str(&format!("{i},{:e},{:e},{:e},{:e}\n", v.total, v.base, v.dispersion, v.structuring));
        }
        write_file("train", path, text)?;
    }
    let window = outcome.trace.len().min(100);
    let mean = |vals: &[geonovel::objective::ObjectiveValue]| {
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().map(|v| v.total).sum::<f64>() / vals.len() as f64
        }
    };
    let n = outcome.trace.len();
    Ok(json_text(&json!({
        "iterations": n,
        "parameters": outcome.model.param_count(),
        "leading_mean_loss": mean(&outcome.trace[..window]),
        "trailing_mean_loss": mean(&outcome.trace[n - window..]),
        "model": out.display().to_string(),
    })))
}

fn estimate(embeddings: &Path, model: Option<&Path>, config: &SpectralConfig, report: Option<&Path>) -> Result<String> {
    let z = directions("estimate", embeddings, model)?;
    let e = at("estimate", embeddings.display(), estimate_class_count(&z, config))?;
    if let Some(path) = report {
        let mut text = String::from("index,eigenvalue,gap\n");
        for (i, lam) in e.eigenvalues.iter().enumerate() {
            match e.gaps.get(i) {
                Some(g) => text.push_str(&format!("{},{lam:e},{g:e}\n", i + 1)),
                None => text.push_str(&format!("{},{lam:e},\n", i + 1)),
            }
        }
        write_file("estimate", path, text)?;
    }
    let solver = match e.solver {
        EigenSolver::Auto => "auto",
        EigenSolver::Dense => "dense",
        EigenSolver::Subspace => "subspace",
    };
    let level = match e.level {
        Level::Coarse => "coarse",
        Level::Fine => "fine",
    };
    Ok(format!(
        "points_used {}\nwindow {} {}\ncoarse_count {}\nfine_count {}\nlevel {level}\ncount {}\nsolver {solver}\nisolated_nodes {}",
        e.points_used,
        e.search_window.0,
        e.search_window.1,
        e.coarse_count,
        e.fine_count,
        e.count(),
        e.isolated_nodes
    ))
}

fn discover_cmd(model: &Path, unlabeled: &Path, k: Option<usize>, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<String> {
    let mut config = load_config(config)?.discover;
    if k.is_some() {
        config.k = k;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    let m = read_model("discover", model)?;
    let ds = read_dataset("discover", unlabeled)?;
    let found = at("discover", unlabeled.display(), discover(&m, &ds.features, &config))?;
    write_file("discover", out, labels_csv("predicted_label", &found.assignment.labels))?;
    let stages: Vec<&str> = found
        .stages
        .iter()
        .map(|s| match s {
            Stage::Encode => "encode",
            Stage::Estimate => "estimate",
            Stage::Cluster => "cluster",
        })
        .collect();
    Ok(json_text(&json!({
        "stages": stages,
        "k": found.k(),
        "estimated_coarse": found.estimate.as_ref().map(|e| e.coarse_count),
        "estimated_fine": found.estimate.as_ref().map(|e| e.fine_count),
        "inertia": found.assignment.inertia,
        "iterations": found.assignment.iterations,
        "converged": found.assignment.converged,
        "assignments": out.display().to_string(),
    })))
}

fn labels_csv(column: &str, labels: &[usize]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["instance_id", column]).expect("in-memory write");
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
}

/// Labels of a two-column `instance_id,<column>` CSV keyed by instance id.
fn read_labels(path: &Path, column: &str) -> Result<BTreeMap<usize, usize>> {
    let data_err = |m: String| CliError::Stage {
        stage: "eval",
        input: path.display().to_string(),
        source: geonovel::Error::Data(m),
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err(e.to_string()))?;
    let header = r.headers().map_err(|e| data_err(e.to_string()))?.clone();
    if header.len() != 2 || &header[0] != "instance_id" || &header[1] != column {
        return Err(data_err(format!("expected header instance_id,{column}")));
    }
    let mut out = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| data_err(format!("row {}: bad integer {s:?}", line + 1)));
        let id = parse(&rec[0])?;
        if out.insert(id, parse(&rec[1])?).is_some() {
            return Err(data_err(format!("duplicate instance_id {id}")));
        }
    }
    Ok(out)
}

fn eval(pred: &Path, truth: &Path, base_classes: &BTreeSet<usize>, out: Option<&Path>) -> Result<String> {
    let p = read_labels(pred, "predicted_label")?;
    let t = read_labels(truth, "label")?;
    if p.keys().ne(t.keys()) {
        return Err(CliError::Stage {
            stage: "eval",
            input: format!("{} / {}", pred.display(), truth.display()),
            source: geonovel::Error::Data("prediction and truth cover different instance ids".into()),
        });
    }
    let pv: Vec<usize> = p.values().copied().collect();
    let tv: Vec<usize> = t.values().copied().collect();
    let report = at("eval", truth.display(), compute_metrics(&pv, &tv, base_classes))?;
    let text = json_text(&report);
    if let Some(path) = out {
        write_file("eval", path, format!("{text}\n"))?;
    }
    Ok(text)
}

fn bench(embeddings: &Path, model: Option<&Path>, k_max: usize, config: &SpectralConfig) -> Result<String> {
    let z = directions("bench-estimate", embeddings, model)?;
    let r = at("bench-estimate", embeddings.display(), bench_estimators(&z, k_max, config))?;
    Ok(json_text(&json!({
        "points": z.nrows(),
        "k_max": k_max,
        "spectral_seconds": r.spectral_seconds,
        "baseline_seconds": r.baseline_seconds,
        "speedup": r.speedup(),
        "spectral_count": r.spectral.coarse_count,
        "baseline_count": r.baseline.count,
        "baseline_degenerate": r.baseline.degenerate,
    })))
}
