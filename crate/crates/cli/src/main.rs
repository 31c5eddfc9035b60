use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use weakmcn::harness::{
    describe, evaluate, gradient_suite, grid_cells, run_ablation, train, Config, FeatureCache, Grid, Model,
    RunOutput, SuiteConfig,
};
use weakmcn::params::ParamStore;
use weakmcn::synth::{self, Dataset, Split};
use weakmcn::wrec::{detector_center_iou, pretrain_detector, DETECTOR_PREFIXES};

#[derive(Parser)]
#[command(name = "weakmcn", version, about = "Weakly supervised box and mask grounding on synthetic scenes")]
struct Cli {
    /// JSON config file; defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set oracle.p_clean=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file plus its vocabulary sidecar.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the class-agnostic detector on boxes.
    PretrainDet {
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weak-phase training from a frozen detector.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Detector checkpoint; pretrained on the fly when absent.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the per-epoch checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Score a trained checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Write the full report (with per-pair records) as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation grid over seeds 1..=N.
    Ablate {
        /// components, ccm, dvfe or alpha.
        #[arg(long, default_value = "components")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every loss and parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the reports as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config, Failure> {
    let base = match path {
        Some(p) => Config::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => Config::default(),
    };
    base.with_overrides(overrides).map_err(|e| Failure::Usage(e.to_string()))
}

fn dataset(config: &Config, path: Option<&Path>) -> Result<Dataset, Failure> {
    Ok(match path {
        Some(p) => synth::load(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?,
        None => synth::generate(&config.dataset)?,
    })
}

fn detector(config: &Config, ds: &Dataset, path: Option<&Path>, out: &Path) -> Result<ParamStore, Failure> {
    if let Some(p) = path {
        return ParamStore::load(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())));
    }
    eprintln!("pretraining detector ({} epochs)", config.pretrain.epochs);
    let (params, _) = pretrain_detector(&ds.train, &config.pretrain)?;
    params.save(&out.join("detector.ckpt"))?;
    Ok(params)
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Failure::Usage(format!("unknown split {s:?} (expected train, val or test)")))
}

fn gen_data(config: Config, seed: Option<u64>, count: Option<usize>, out: &Path) -> Outcome {
    let mut overrides = Vec::new();
    overrides.extend(seed.map(|s| format!("dataset.seed={s}")));
    overrides.extend(count.map(|c| format!("dataset.count={c}")));
    let config = config.with_overrides(&overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = synth::generate(&config.dataset)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("dataset.bin");
    synth::save(&ds, &path)?;
    println!(
        "wrote {} ({} train, {} val, {} test)",
        path.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(())
}

fn pretrain(config: Config, data: Option<&Path>, out: &Path) -> Outcome {
    let ds = dataset(&config, data)?;
    std::fs::create_dir_all(out)?;
    let (params, report) = pretrain_detector(&ds.train, &config.pretrain)?;
    params.save(&out.join("detector.ckpt"))?;
    let held_out = if ds.test.is_empty() { &ds.val } else { &ds.test };
    let iou = detector_center_iou(&params, held_out)?;
    let summary = serde_json::json!({
        "pretrain": config.pretrain,
        "epoch_loss": report.epoch_loss,
        "held_out_center_iou": iou,
    });
    std::fs::write(out.join("pretrain.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("held-out center-cell IoU {iou:.4}");
    Ok(())
}

fn train_cmd(config: Config, data: Option<&Path>, det: Option<&Path>, out: &Path, checkpoints: bool) -> Outcome {
    let ds = dataset(&config, data)?;
    std::fs::create_dir_all(out)?;
    let det = detector(&config, &ds, det, out)?;
    let cache = FeatureCache::build(&ds, &det)?;
    let output = RunOutput {
        dir: Some(out.to_path_buf()),
        dataset_path: data.map(Path::to_path_buf),
        checkpoints,
    };
    let outcome = train(&config, &ds, &cache, &det, &output)?;
    for e in &outcome.log {
        println!("{}", describe(e));
    }
    println!("test rec_acc {:.4} res_miou {:.4}", outcome.test.rec_acc, outcome.test.res_miou);
    Ok(())
}

fn eval_cmd(cli_config: Option<&Path>, set: &[String], checkpoint: &Path, data: Option<&Path>, split: &str, out: Option<&Path>) -> Outcome {
    let split = parse_split(split)?;
    // a run directory keeps its config next to the checkpoints folder
    let sibling = checkpoint.parent().and_then(Path::parent).map(|d| d.join("config.json"));
    let path = cli_config.map(Path::to_path_buf).or(sibling.filter(|p| p.exists()));
    let config = load_config(path.as_deref(), set)?;
    let params = ParamStore::load(checkpoint).map_err(|e| Failure::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let mut det = ParamStore::new();
    for p in DETECTOR_PREFIXES {
        det.extend(&params.subset(p));
    }
    let ds = dataset(&config, data)?;
    let cache = FeatureCache::build(&ds, &det)?;
    let model = Model { config, params };
    let report = evaluate(&model, &ds, &cache, split)?;
    if let Some(o) = out {
        std::fs::write(o, serde_json::to_string_pretty(&report)?)?;
    }
    println!(
        "{}",
        serde_json::json!({ "split": split, "pairs": report.records.len(), "rec_acc": report.rec_acc, "res_miou": report.res_miou })
    );
    Ok(())
}

fn ablate(config: Config, grid: &str, seeds: u64, data: Option<&Path>, det: Option<&Path>, out: &Path) -> Outcome {
    let grid: Grid = grid.parse().map_err(|e: weakmcn::Error| Failure::Usage(e.to_string()))?;
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let ds = dataset(&config, data)?;
    std::fs::create_dir_all(out)?;
    let det = detector(&config, &ds, det, out)?;
    let cache = FeatureCache::build(&ds, &det)?;
    let cells = grid_cells(grid, &config);
    let seeds: Vec<u64> = (1..=seeds).collect();
    let table = run_ablation(&config, &cells, &seeds, &ds, &cache, &det, |r| match (&r.metrics, &r.error) {
        (Some((rec, res)), _) => eprintln!("{} seed {}: rec_acc {rec:.4} res_miou {res:.4}", r.cell.id, r.seed),
        (None, e) => eprintln!("{} seed {}: failed: {}", r.cell.id, r.seed, e.as_deref().unwrap_or("")),
    });
    table.write(out)?;
    print!("{}", table.summary_csv());
    let failed = table.runs.iter().filter(|r| r.metrics.is_none()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} runs failed", table.runs.len())));
    }
    Ok(())
}

fn gradcheck(instances: usize, coords: usize, seed: u64, out: Option<&Path>) -> Outcome {
    if instances == 0 || coords == 0 {
        return Err(Failure::Usage("--instances and --coords must be positive".into()));
    }
    let entries = gradient_suite(&SuiteConfig {
        instances,
        coords,
        seed,
        ..SuiteConfig::default()
    })?;
    let mut all = true;
    for e in &entries {
        let ok = e.report.passed();
        all &= ok;
        println!(
            "{:<16} {}  max rel err {:.3e}  instances {}  straddled {}",
            e.report.op,
            if ok { "PASS" } else { "FAIL" },
            e.report.max_rel_err,
            e.instances,
            e.straddled
        );
    }
    if let Some(o) = out {
        let reports: Vec<_> = entries.iter().map(|e| &e.report).collect();
        std::fs::write(o, serde_json::to_string_pretty(&reports)?)?;
    }
    if all {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg_path = cli.config.as_deref();
    if let Command::Eval {
        checkpoint,
        data,
        split,
        out,
    } = &cli.command
    {
        return eval_cmd(cfg_path, &cli.set, checkpoint, data.as_deref(), split, out.as_deref());
    }
    let config = load_config(cfg_path, &cli.set)?;
    match cli.command {
        Command::GenData { seed, count, out } => gen_data(config, seed, count, &out),
        Command::PretrainDet { data, out } => pretrain(config, data.as_deref(), &out),
        Command::Train {
            data,
            detector,
            out,
            no_checkpoints,
        } => train_cmd(config, data.as_deref(), detector.as_deref(), &out, !no_checkpoints),
        Command::Ablate {
            grid,
            seeds,
            data,
            detector,
            out,
        } => ablate(config, &grid, seeds, data.as_deref(), detector.as_deref(), &out),
        Command::Gradcheck {
            instances,
            coords,
            seed,
            out,
        } => gradcheck(instances, coords, seed, out.as_deref()),
        Command::Eval { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
