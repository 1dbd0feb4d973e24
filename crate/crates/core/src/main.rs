use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mie::config::{Grid, RunConfig};
use mie::data::{self, MultimodalDataset, Split};
use mie::eval::{self, MetricsReport};
use mie::gradmod::SingularReport;
use mie::nn::ModalityModel;
use mie::trainer::{self, PhaseRecord};
use mie::{MieError, Result, ARTIFACT_VERSION};

#[derive(Parser)]
#[command(name = "mie", version, about = "Modal-aware interactive enhancement for multimodal classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to `data.path`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration and write checkpoints, trace and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every variant of a grid file for every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a 2D loss-landscape slice around a checkpoint as CSV.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise the singular values and phase trace of one or two runs.
    Report {
        #[arg(required = true, num_args = 1..=2)]
        runs: Vec<PathBuf>,
        /// Print the singular-value records as JSON lines instead of a table.
        #[arg(long)]
        json: bool,
    },
}

const RUN_FILES: [&str; 3] = ["trace.jsonl", "metrics.json", "singular.json"];

#[derive(Serialize, Deserialize)]
struct Metadata {
    artifact_version: String,
    label: String,
    tau: f64,
    rho: Vec<f64>,
    config: String,
}

impl Metadata {
    fn of(cfg: &RunConfig) -> Self {
        Metadata {
            artifact_version: ARTIFACT_VERSION.to_string(),
            label: cfg.label().to_string(),
            tau: cfg.train.gm.tau,
            rho: cfg.train.rho.clone(),
            config: cfg.to_text(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    metadata: Metadata,
    /// Weighted fusion scores each sample's modalities by softmax(−entropy).
    weighted_fusion: String,
    reports: Vec<MetricsReport>,
}

#[derive(Serialize, Deserialize)]
struct SingularFile {
    metadata: Metadata,
    reports: Vec<SingularReport>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MieError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| MieError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| MieError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MieError::format(path.display().to_string(), e.to_string()))
}

fn load_dataset(cfg: &RunConfig) -> Result<MultimodalDataset> {
    let ds = MultimodalDataset::load(&cfg.data_path)?;
    if ds.modalities() != cfg.data.modalities() {
        log::warn!(
            "dataset has {} modalities, configuration describes {}",
            ds.modalities(),
            cfg.data.modalities()
        );
    }
    cfg.train.validate(ds.modalities())?;
    Ok(ds)
}

fn gen_data(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = data::generate(&cfg.data)?;
    let path = out.unwrap_or_else(|| cfg.data_path.clone());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(&path)?;
    let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| ds.split_indices(s).len())
        .collect();
    println!(
        "wrote {}: n={} m={} c={} dims={:?} train/val/test={}/{}/{}",
        path.display(),
        ds.len(),
        ds.modalities(),
        ds.classes(),
        ds.dims(),
        sizes[0],
        sizes[1],
        sizes[2]
    );
    Ok(())
}

fn train(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = load_dataset(&cfg)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let outcome = trainer::train(&ds, &cfg.train)?;
    create_dir(&dir)?;

    write_file(&dir.join("config.txt"), cfg.to_text())?;
    for (j, model) in outcome.models.iter().enumerate() {
        model.save(dir.join(format!("checkpoint_m{}.mie", j + 1)))?;
    }
    let mut trace = to_json(&Metadata::of(&cfg));
    trace.push('\n');
    for rec in &outcome.trace {
        trace.push_str(&to_json(rec));
        trace.push('\n');
    }
    write_file(&dir.join("trace.jsonl"), trace)?;
    write_file(
        &dir.join("metrics.json"),
        to_json_pretty(&MetricsFile {
            metadata: Metadata::of(&cfg),
            weighted_fusion: "per-sample softmax of negative prediction entropy".into(),
            reports: outcome.metrics.clone(),
        }),
    )?;
    write_file(
        &dir.join("singular.json"),
        to_json_pretty(&SingularFile {
            metadata: Metadata::of(&cfg),
            reports: outcome.singular.clone(),
        }),
    )?;

    let r = outcome.metrics_for(cfg.fusion);
    println!(
        "{} ({} fusion): accuracy {:.4}, MAP {:.4}, macro-F1 {:.4}; per modality accuracy {:?}",
        cfg.label(),
        cfg.fusion,
        r.fused.accuracy,
        r.fused.map,
        r.fused.macro_f1,
        r.per_modality.iter().map(|m| m.accuracy).collect::<Vec<_>>()
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("MIE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| MieError::validation(format!("MIE_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn ablate(common: &Common, grid_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let grid = Grid::read(grid_path)?;
    let threads = threads_from_env()?;
    let ds = load_dataset(&cfg)?;
    let variants = grid.variants(&cfg.train);
    let table = trainer::ablate(&ds, &variants, &grid.seeds, threads)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;

    let grid_text = fs::read_to_string(grid_path).map_err(|e| MieError::io(grid_path, e))?;
    let meta = json!({
        "artifact_version": ARTIFACT_VERSION,
        "config": cfg.to_text(),
        "grid": grid_text,
    });
    let mut runs = to_json(&meta);
    runs.push('\n');
    for r in &table.runs {
        runs.push_str(&to_json(r));
        runs.push('\n');
    }
    write_file(&dir.join("runs.jsonl"), runs)?;
    write_file(
        &dir.join("table.json"),
        to_json_pretty(&json!({ "metadata": meta, "rows": table.rows })),
    )?;

    println!("{:<40} {:>5} {:>17} {:>17}", "variant", "runs", "accuracy", "MAP");
    for row in &table.rows {
        let s = &row.fused_average;
        println!(
            "{:<40} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            row.label, row.runs, s.accuracy.mean, s.accuracy.std, s.map.mean, s.map.std
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn landscape(common: &Common, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let model = ModalityModel::load(checkpoint)?;
    let ds = load_dataset(&cfg)?;
    let j = cfg.landscape.modality - 1;
    if j >= ds.modalities() {
        return Err(MieError::validation("landscape.modality out of range for the dataset"));
    }
    if model.input_dim() != ds.dims()[j] || model.classes() != ds.classes() {
        return Err(MieError::validation(format!(
            "checkpoint {} does not fit modality {} of the dataset",
            checkpoint.display(),
            j + 1
        )));
    }
    let mut idx = ds.split_indices(Split::Test);
    if cfg.landscape.samples > 0 {
        idx.truncate(cfg.landscape.samples);
    }
    let batch = ds.batch(j, &idx)?;
    let points = eval::landscape_slice(&model, &batch, cfg.landscape.radius, cfg.landscape.points, cfg.seed)?;

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = fs::File::create(out).map_err(|e| MieError::io(out, e))?;
    let mut w = BufWriter::new(file);
    eval::write_landscape_csv(&points, &mut w).map_err(|e| MieError::io(out, e))?;
    w.flush().map_err(|e| MieError::io(out, e))?;

    let mut meta_path = out.as_os_str().to_owned();
    meta_path.push(".meta.json");
    let meta = json!({
        "artifact_version": ARTIFACT_VERSION,
        "checkpoint": checkpoint.display().to_string(),
        "config": cfg.to_text(),
    });
    write_file(Path::new(&meta_path), to_json_pretty(&meta))?;
    println!("wrote {} ({} points)", out.display(), points.len());
    Ok(())
}

struct RunArtifacts {
    dir: PathBuf,
    label: String,
    trace: Vec<PhaseRecord>,
    singular: Vec<SingularReport>,
}

fn read_run(dir: &Path) -> Result<RunArtifacts> {
    let missing: Vec<&str> = RUN_FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(MieError::validation(format!(
            "{} is not a run directory: missing {} (expected {})",
            dir.display(),
            missing.join(", "),
            RUN_FILES.join(", ")
        )));
    }
    let trace_path = dir.join("trace.jsonl");
    let text = fs::read_to_string(&trace_path).map_err(|e| MieError::io(&trace_path, e))?;
    let bad = |e: serde_json::Error| MieError::format(trace_path.display().to_string(), e.to_string());
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let meta: Metadata = serde_json::from_str(lines.next().unwrap_or("")).map_err(bad)?;
    let trace = lines.map(|l| serde_json::from_str(l).map_err(bad)).collect::<Result<_>>()?;
    let singular: SingularFile = read_json(&dir.join("singular.json"))?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        label: meta.label,
        trace,
        singular: singular.reports,
    })
}

fn report(dirs: &[PathBuf], as_json: bool) -> Result<()> {
    let runs = dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;

    if as_json {
        for run in &runs {
            for rep in &run.singular {
                for s in &rep.layers {
                    let rec = json!({
                        "run": run.dir.display().to_string(),
                        "label": run.label,
                        "modality": rep.modality,
                        "layer": s.layer,
                        "max": s.max,
                        "mean": s.mean,
                    });
                    println!("{rec}");
                }
            }
        }
    } else {
        println!("singular values of the cumulative feature covariance");
        print!("{:<10}{:<7}", "modality", "layer");
        for run in &runs {
            print!("{:>16}{:>16}", format!("{} max", run.label), format!("{} mean", run.label));
        }
        println!();
        for (ri, rep) in runs[0].singular.iter().enumerate() {
            for (li, s) in rep.layers.iter().enumerate() {
                print!("{:<10}{:<7}", rep.modality, s.layer);
                for run in &runs {
                    match run.singular.get(ri).and_then(|r| r.layers.get(li)) {
                        Some(o) => print!("{:>16.6e}{:>16.6e}", o.max, o.mean),
                        None => print!("{:>16}{:>16}", "-", "-"),
                    }
                }
                println!();
            }
        }
    }

    for run in &runs {
        println!();
        println!("phase trace of {} ({})", run.dir.display(), run.label);
        println!("{:>6} {:>9} {:>10} {:>12} {:>10}  per-modality accuracy", "outer", "modality", "fused acc", "train loss", "lr");
        for p in &run.trace {
            let per: Vec<String> = p.phase_end_per_modality_accuracy.iter().map(|a| format!("{a:.4}")).collect();
            println!(
                "{:>6} {:>9} {:>10.4} {:>12.5} {:>10.2e}  {}",
                p.outer_iter,
                p.modality_index,
                p.phase_end_multi_accuracy,
                p.mean_train_loss,
                p.learning_rate,
                per.join(" ")
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, out),
        Command::Train { common, out } => train(&common, out),
        Command::Ablate { common, grid, out } => ablate(&common, &grid, out),
        Command::Landscape { common, checkpoint, out } => landscape(&common, &checkpoint, &out),
        Command::Report { runs, json } => report(&runs, json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
