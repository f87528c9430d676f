use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use anyseg::eval::{self, MassReport};
use anyseg::masm::{write_rankings_csv, RankingResult};
use anyseg::synth::{self, Condition, Dataset, ModalityKind, SceneSpec};
use anyseg::train::{self, check_modalities, TrainConfig};
use anyseg::{Model, Trainer};

const TRAIN_FILE: &str = "train.mmss";
const EVAL_FILE: &str = "eval.mmss";
const MODEL_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "anyseg", version, about = "Modality-agnostic multi-modal segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/eval splits.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on every modality subset.
    Eval(EvalArgs),
    /// Re-render a saved evaluation.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory; receives train.mmss and eval.mmss.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    eval: usize,
    #[arg(long, default_value_t = 0.5)]
    p_night: f64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Comma-separated subset of rgb,depth,event,lidar.
    #[arg(long, default_value = "rgb,depth,event,lidar")]
    modalities: String,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// A .mmss file, or a directory containing train.mmss.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt and train_log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from OUT/model.ckpt instead of starting fresh.
    #[arg(long)]
    resume: bool,
    /// Write per-scene robust/fragile rankings of the trained model as CSV.
    #[arg(long)]
    dump_rankings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum CondArg {
    Day,
    Night,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// A checkpoint file, or a directory containing model.ckpt.
    #[arg(long)]
    model: PathBuf,
    /// A .mmss file, or a directory containing eval.mmss.
    #[arg(long)]
    data: PathBuf,
    /// Rendered report; a JSON copy is written next to it as REPORT.json.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    /// Row label in the report.
    #[arg(long, default_value = "model")]
    name: String,
    /// Only evaluate scenes recorded under this condition.
    #[arg(long, value_enum)]
    condition: Option<CondArg>,
    #[arg(long)]
    dump_rankings: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// JSON written by `eval`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn resolve(path: &Path, default_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let modalities = a
        .modalities
        .split(',')
        .map(|s| ModalityKind::from_name(s.trim()))
        .collect::<anyseg::Result<Vec<_>>>()?;
    let spec = SceneSpec {
        height: a.size,
        width: a.size,
        classes: a.classes,
        modalities,
        p_night: a.p_night,
    };
    spec.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let train = Dataset::generate(a.seed, 0, a.train, &spec)?;
    // eval scenes come from a disjoint range of scene indices
    let eval = Dataset::generate(a.seed, a.train as u64, a.eval, &spec)?;
    synth::write_dataset(a.out.join(TRAIN_FILE), &train)?;
    synth::write_dataset(a.out.join(EVAL_FILE), &eval)?;
    eprintln!(
        "wrote {} train and {} eval scenes to {}",
        train.len(),
        eval.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let data_path = resolve(&a.data, TRAIN_FILE);
    let data = synth::read_dataset(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join(MODEL_FILE);
    let log_path = a.out.join(LOG_FILE);

    let (mut trainer, mut log) = if a.resume {
        let t: Trainer = train::load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let log = fs::OpenOptions::new().append(true).open(&log_path)?;
        (t, BufWriter::new(log))
    } else {
        let t = Trainer::new(config, &data.modalities, data.classes)?;
        let mut log = BufWriter::new(File::create(&log_path)?);
        writeln!(log, "{}", train::LOG_HEADER)?;
        (t, log)
    };

    let mut io_err = None;
    trainer.fit(&data, |s| {
        eprintln!(
            "epoch {:>3}  L_M {:.4}  L_C {:.4}  L {:.4}  lr {:.2e}",
            s.epoch, s.losses.seg, s.losses.consistency, s.losses.total, s.lr
        );
        if let Err(e) = train::write_log_row(&mut log, s).and_then(|_| Ok(log.flush()?)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    train::save_checkpoint(&ckpt, &trainer)?;
    eprintln!("saved {}", ckpt.display());

    if let Some(path) = a.dump_rankings {
        dump_rankings(&trainer.model, &data, &path)?;
    }
    Ok(())
}

fn dump_rankings(model: &Model, data: &Dataset, path: &Path) -> Result<()> {
    let rows = data
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, eval::scene_rankings(model, s)?)))
        .collect::<anyseg::Result<Vec<(usize, Vec<RankingResult>)>>>()?;
    write_rankings_csv(BufWriter::new(File::create(path)?), &rows, &data.modalities)?;
    Ok(())
}

fn render(report: &MassReport, format: Format) -> String {
    match format {
        Format::Markdown => report.to_markdown(),
        Format::Csv => report.to_csv(),
    }
}

fn json_sidecar(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model_path = resolve(&a.model, MODEL_FILE);
    let model: Model = train::load_model(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let data_path = resolve(&a.data, EVAL_FILE);
    let data = synth::read_dataset(&data_path).with_context(|| format!("reading {}", data_path.display()))?;
    check_modalities(&model.config.modalities, &data.modalities)?;
    if data.classes != model.config.classes {
        bail!("model has {} classes, data has {}", model.config.classes, data.classes);
    }
    let condition = a.condition.map(|c| match c {
        CondArg::Day => Condition::Day,
        CondArg::Night => Condition::Night,
    });
    let report = eval::mass_report(&model, &data, &a.name, condition)?;
    fs::write(&a.report, render(&report, a.format))?;
    fs::write(json_sidecar(&a.report), report.to_json()?)?;
    eprintln!("mean over {} subsets: {:.2}", report.columns.len(), report.rows[0].mean);
    if let Some(path) = a.dump_rankings {
        dump_rankings(&model, &data, &path)?;
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report = MassReport::from_json(&text)?;
    let out = render(&report, a.format);
    match a.out {
        Some(path) => fs::write(path, out)?,
        None => io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}
