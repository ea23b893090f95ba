use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use lttr::config::RunConfig;
use lttr::export::export_maps;
use lttr::model::{Model, Variant};
use lttr::scene::{read_sequence, read_sequence_dir, write_sequence, Sequence};
use lttr::tensor::{load_checkpoint, save_checkpoint};
use lttr::tracker::{evaluate_ope, run_ablation, track_sequence, train, write_ablation_csv, write_loss_csv, OpeResult, TrackStep};

#[derive(Parser)]
#[command(name = "lttr", version, about = "Point-cloud single-object tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic sequences and a manifest.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model; writes the checkpoint, its config and the loss curve.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// One-pass evaluation over a directory of sequences.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Score saved `track` outputs (`<sequence>.json`) instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence and write the per-frame boxes.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all four variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Held-out sequences; the training data is reused when absent.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump heatmaps, region weights and attention maps of one frame.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<lttr::Error> for Failure {
    fn from(e: lttr::Error) -> Self {
        match e {
            lttr::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Failure::Usage(format!("--set {path}: `{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry(*key).or_insert_with(|| json!({}));
    }
    Ok(())
}

impl ConfigArgs {
    /// File, then `--set` overrides, then the seed environment variable, then flags.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
            }
            None => json!({}),
        };
        for o in &self.overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set {o}: expected PATH=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut doc, path, value)?;
        }
        let origin = self.config.as_deref().unwrap_or(Path::new("<config>"));
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Failure::Usage(format!("{}: {e}", origin.display())))?;
        cfg.apply_env()?;
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        log::debug!("resolved config: {}", cfg.to_json());
        Ok(cfg)
    }
}

fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn load_model(checkpoint: &Path) -> CliResult<(RunConfig, Model)> {
    let cpath = config_path(checkpoint);
    let text = fs::read_to_string(&cpath).map_err(|e| io_err(&cpath, e))?;
    let cfg = RunConfig::from_json(&text, &cpath)?;
    let mut model = Model::new(cfg.model(), cfg.seed)?;
    model.store.load_values(&load_checkpoint(checkpoint)?)?;
    Ok((cfg, model))
}

fn read_data(dir: &Path) -> CliResult<Vec<(String, Sequence)>> {
    let data = read_sequence_dir(dir)?;
    if data.is_empty() {
        return Err(Failure::Runtime(format!("{}: no .jsonl sequences", dir.display())));
    }
    Ok(data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Serialize, Deserialize)]
struct TrackFile {
    sequence: String,
    variant: String,
    steps: Vec<TrackStep>,
}

#[derive(Serialize)]
struct FrameScore {
    sequence: String,
    frame: usize,
    iou: f64,
    center_error: f64,
}

#[derive(Serialize)]
struct EvalReport {
    variant: String,
    success: f64,
    precision: f64,
    per_frame: Vec<FrameScore>,
}

fn cmd_gen(cfg: &ConfigArgs, count: Option<usize>, out_dir: &Path) -> CliResult<()> {
    let run = cfg.resolve()?;
    let count = count.unwrap_or(run.data.sequences);
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for (i, seq) in run.data.generate(run.seed, count)?.iter().enumerate() {
        let file = format!("seq_{i:03}.jsonl");
        write_sequence(seq, &out_dir.join(&file))?;
        entries.push(json!({ "file": file, "seed": run.seed.wrapping_add(i as u64), "frames": seq.len() }));
    }
    let manifest = json!({ "seed": run.seed, "data": run.data, "sequences": entries });
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string_pretty(&manifest).unwrap());
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, data: &Path, out: &Path, loss_csv: Option<&Path>) -> CliResult<()> {
    let run = cfg.resolve()?;
    let data: Vec<Sequence> = read_data(data)?.into_iter().map(|(_, s)| s).collect();
    let mut model = Model::new(run.model(), run.seed)?;
    let records = train(&mut model, &data, &run.train, &run.loss, run.seed)?;
    save_checkpoint(&model.store, out)?;
    write_json(&config_path(out), &run)?;
    let csv = loss_csv.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let file = fs::File::create(&csv).map_err(|e| io_err(&csv, e))?;
    write_loss_csv(&records, std::io::BufWriter::new(file)).map_err(|e| io_err(&csv, e))?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!("trained {} steps: loss {:.4} -> {:.4}", records.len(), first.total, last.total);
    }
    Ok(())
}

fn cmd_eval(checkpoint: Option<&Path>, predictions: Option<&Path>, data: &Path, out: &Path) -> CliResult<()> {
    let data = read_data(data)?;
    let model = checkpoint.map(load_model).transpose()?;
    let mut variant = "predictions".to_owned();
    let mut results = Vec::with_capacity(data.len());
    let mut per_frame = Vec::new();
    for (name, seq) in &data {
        let boxes: Vec<_> = match (&model, predictions) {
            (Some((cfg, model)), _) => {
                variant = model.variant().name().to_owned();
                track_sequence(model, seq, cfg.seed)?.iter().map(|s| s.bbox).collect()
            }
            (None, Some(dir)) => {
                let path = dir.join(format!("{name}.json"));
                let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                let track: TrackFile = serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                track.steps.iter().map(|s| s.bbox).collect()
            }
            (None, None) => return Err(Failure::Usage("eval needs --checkpoint or --predictions".into())),
        };
        let r = evaluate_ope(&boxes, &seq.gt_boxes())?;
        for (k, (&iou, &err)) in r.ious.iter().zip(&r.center_errors).enumerate() {
            per_frame.push(FrameScore {
                sequence: name.clone(),
                frame: k + 1,
                iou,
                center_error: err,
            });
        }
        results.push(r);
    }
    let merged = OpeResult::merge(&results)?;
    let report = EvalReport {
        variant,
        success: merged.success,
        precision: merged.precision,
        per_frame,
    };
    write_json(out, &report)?;
    println!("success {:.4} precision {:.4}", report.success, report.precision);
    Ok(())
}

fn cmd_track(checkpoint: &Path, sequence: &Path, out: &Path) -> CliResult<()> {
    let (cfg, model) = load_model(checkpoint)?;
    let seq = read_sequence(sequence)?;
    let steps = track_sequence(&model, &seq, cfg.seed)?;
    let name = sequence.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    write_json(
        out,
        &TrackFile {
            sequence: name,
            variant: model.variant().name().to_owned(),
            steps,
        },
    )
}

fn cmd_ablate(cfg: &ConfigArgs, data: &Path, eval_data: Option<&Path>, out: &Path) -> CliResult<()> {
    let run = cfg.resolve()?;
    let train_data: Vec<Sequence> = read_data(data)?.into_iter().map(|(_, s)| s).collect();
    let eval_set: Vec<Sequence> = match eval_data {
        Some(dir) => read_data(dir)?.into_iter().map(|(_, s)| s).collect(),
        None => train_data.clone(),
    };
    let rows = run_ablation(&run.model(), &train_data, &eval_set, &run.train, &run.loss, run.seed)?;
    let file = fs::File::create(out).map_err(|e| io_err(out, e))?;
    write_ablation_csv(&rows, std::io::BufWriter::new(file)).map_err(|e| io_err(out, e))?;
    for r in &rows {
        println!("{:<26} success {:.4} precision {:.4}", r.label, r.success, r.precision);
    }
    Ok(())
}

fn cmd_export(checkpoint: &Path, sequence: &Path, frame: usize, out_dir: &Path) -> CliResult<()> {
    let (cfg, model) = load_model(checkpoint)?;
    let seq = read_sequence(sequence)?;
    let manifest = export_maps(&model, &seq, frame, cfg.seed, out_dir)?;
    println!("wrote {} arrays to {}", manifest.arrays.len(), out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen { cfg, count, out_dir } => cmd_gen(cfg, *count, out_dir),
        Command::Train { cfg, data, out, loss_csv } => cmd_train(cfg, data, out, loss_csv.as_deref()),
        Command::Eval {
            checkpoint,
            predictions,
            data,
            out,
        } => cmd_eval(checkpoint.as_deref(), predictions.as_deref(), data, out),
        Command::Track { checkpoint, sequence, out } => cmd_track(checkpoint, sequence, out),
        Command::Ablate { cfg, data, eval_data, out } => cmd_ablate(cfg, data, eval_data.as_deref(), out),
        Command::ExportMaps {
            checkpoint,
            sequence,
            frame,
            out_dir,
        } => cmd_export(checkpoint, sequence, *frame, out_dir),
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
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
