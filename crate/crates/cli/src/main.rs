use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mscm::checkpoint::{self, NamedTensors};
use mscm::config::RunConfig;
use mscm::data::{generate_dataset, load_dataset, write_dataset, GenParams};
use mscm::experiment::{protocol_config, split, sweep_alb, sweep_csv};
use mscm::gradsuite::{run_suite, SuiteOptions};
use mscm::model::Model;
use mscm::protocol::{extract_bank, run_protocol_on_bank, Direction};
use mscm::tensor::Fault;
use mscm::train::Trainer;
use mscm::{Error, Result};

/// Name of the config snapshot written next to the checkpoints.
const RUN_CONFIG: &str = "run.cfg";
const TRAIN_LOG: &str = "train.log";
const FINAL_CHECKPOINT: &str = "final.ck";

#[derive(Parser)]
#[command(name = "mscm", version, about = "Visible-infrared re-identification at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired visible/infrared dataset.
    GenData(GenDataArgs),
    /// Train on the training identities of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out identities.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every ALB depth with and without multi-scale input.
    SweepAlb(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    ids: u32,
    #[arg(long, default_value_t = 8)]
    per_id: u32,
    /// Image size as HxW.
    #[arg(long, default_value = "96x48")]
    size: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    cams: u32,
    #[arg(long, default_value_t = 0.3)]
    modality_gap: f64,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key/value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parallel data preparation and feature extraction.
    #[arg(long)]
    parallel: bool,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.exists() => RunConfig::load(p)?,
            _ => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if self.parallel {
            cfg.parallel = true;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory (default: paths.dataset_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint directory (default: paths.checkpoint_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    V2t,
    T2v,
    Both,
}

impl DirectionArg {
    fn directions(self) -> Vec<Direction> {
        match self {
            DirectionArg::V2t => vec![Direction::V2T],
            DirectionArg::T2v => vec![Direction::T2V],
            DirectionArg::Both => vec![Direction::V2T, Direction::T2V],
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    /// Report directory.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Also save the embedded test split as a feature bank.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("invalid size `{s}` (expected HxW)"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (image_h, image_w) = parse_size(&a.size)?;
    let params = GenParams {
        num_identities: a.ids,
        samples_per_id_per_modality: a.per_id,
        image_h,
        image_w,
        cams_per_modality: a.cams,
        modality_gap: a.modality_gap,
        noise_std: a.noise,
        seed: a.seed,
    };
    params.validate()?;
    let ds = generate_dataset(&params)?;
    write_dataset(&ds, &a.out)?;
    println!(
        "wrote {} records ({} identities, {} per identity and modality, {image_h}x{image_w}) to {}",
        ds.records.len(),
        a.ids,
        a.per_id,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let data = a.data.clone().unwrap_or_else(|| cfg.paths.dataset_dir.clone());
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
    let ds = load_dataset(&data)?;
    let (train_split, _) = split(&cfg, &ds)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg, &train_split, checkpoint::load(p)?)?,
        None => Trainer::new(cfg, &train_split)?,
    };
    create_dir(&out)?;
    write_file(&out.join(RUN_CONFIG), &trainer.cfg.to_text())?;
    let log_path = out.join(TRAIN_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = trainer.cfg.checkpoint_every;
    let result = trainer.run(
        &mut |r| writeln!(log, "{r}").map_err(|e| Error::io(&log_path, e)),
        &mut |t, s| {
            println!("epoch {} lr {:e} steps {} mean_l_total {:.6}", s.epoch, s.lr, s.steps, s.mean_total);
            let done = t.epochs_done();
            if every > 0 && done % every == 0 {
                save_state(&out.join(format!("epoch-{done:04}.ck")), t.state()?)?;
            }
            Ok(())
        },
    );
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    save_state(&out.join(FINAL_CHECKPOINT), trainer.state()?)?;
    println!("final checkpoint {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn save_state(path: &Path, state: NamedTensors) -> Result<()> {
    checkpoint::save(path, &state)
}

/// Width of the classifier stored in a checkpoint.
fn checkpoint_classes(state: &NamedTensors) -> Result<usize> {
    state
        .iter()
        .find(|(n, _)| n == "classifier.weight")
        .and_then(|(_, t)| t.shape().get(1).copied())
        .ok_or_else(|| Error::format("checkpoint", "no classifier.weight tensor"))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let sidecar = a.checkpoint.parent().map(|d| d.join(RUN_CONFIG));
    let mut cfg = a.cfg.resolve(sidecar.as_deref())?;
    cfg.model.num_classes = checkpoint_classes(&state)?;
    cfg.validate()?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::restore(&mut model, state)?;
    model.set_training(false);

    let data = a.data.clone().unwrap_or_else(|| cfg.paths.dataset_dir.clone());
    let ds = load_dataset(&data)?;
    let (_, test) = split(&cfg, &ds)?;
    let bank = extract_bank(&model, &test.records, (cfg.augment.target_h, cfg.augment.target_w), cfg.parallel)?;
    create_dir(&a.out)?;
    if let Some(p) = &a.bank {
        bank.save(p)?;
    }
    let pc = protocol_config(&cfg);
    for d in a.direction.directions() {
        let r = run_protocol_on_bank(&bank, d, &pc)?;
        let kv = r.mean.to_kv(&d.to_string());
        write_file(&a.out.join(format!("report-{d}.txt")), &kv)?;
        write_file(&a.out.join(format!("cmc-{d}.csv")), &r.mean.cmc_csv())?;
        print!("{kv}");
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("conv2d") => Some(Fault::Conv2dBackward),
        Some(other) => return Err(Error::Config(format!("unknown fault `{other}`"))),
    };
    let opts = SuiteOptions {
        seeds: a.seeds,
        tol: a.tol,
        fault,
        ..SuiteOptions::default()
    };
    let results = run_suite(&opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed (tol {:e})", results.len(), a.tol);
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.cfg.resolve(None)?;
    let data = a.data.clone().unwrap_or_else(|| cfg.paths.dataset_dir.clone());
    let ds = load_dataset(&data)?;
    let rows = sweep_alb(&cfg, &ds, &mut |r| {
        eprintln!(
            "num_alb={} multiscale={} rank1={:.4} map={:.4}",
            r.num_alb,
            if r.multiscale { "on" } else { "off" },
            r.rank1,
            r.map
        );
    })?;
    let csv = sweep_csv(&rows);
    match &a.out {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| Error::io(p, e))?;
            f.write_all(csv.as_bytes()).map_err(|e| Error::io(p, e))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SweepAlb(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
