use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afaseg_core::config::RunConfig;
use afaseg_core::eval::{compare_models, evaluate_dataset, noise_seed, predict_sample, SweepConfig};
use afaseg_core::gradcheck::{op_by_name, run_grad_check, GradCheckOptions};
use afaseg_core::metrics::{read_records_csv, write_records_csv};
use afaseg_core::net::SegNet;
use afaseg_core::phantom::generate_dataset;
use afaseg_core::train::train;
use afaseg_core::volume::{read_image, write_volume, Manifest, SampleEntry};
use afaseg_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Worker threads for per-sample evaluation; 1 when unset.
const THREADS_VAR: &str = "AFASEG_THREADS";

#[derive(Parser)]
#[command(name = "afaseg", version, about = "Phantom segmentation with adversarial feature augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom volumes and a split manifest under `<out_dir>/data`.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model; writes the step log and checkpoints to `<out_dir>`.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write predicted label volumes to `<out_dir>/predictions`.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
    },
    /// Per-sample metrics at one noise level, written to `<out_dir>/metrics.csv`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
    },
    /// Per-sample metrics over the configured noise ladder, written to `<out_dir>/sweep.csv`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Compare two metrics files; writes `compare.csv` and `compare_summary.json`.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "a")]
        name_a: String,
        #[arg(long, default_value = "b")]
        name_b: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Finite-difference gradient checks in double precision.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e).to_string()))
}

fn entries(m: &Manifest, split: Split) -> &[SampleEntry] {
    match split {
        Split::Train => &m.train,
        Split::Test => &m.test,
    }
}

fn gen_data(cfg: &RunConfig) -> Outcome {
    let m = generate_dataset(&cfg.phantom_config(), cfg.dataset.count, &cfg.data_dir())?;
    println!("wrote {} train / {} test samples to {}", m.train.len(), m.test.len(), cfg.data_dir().display());
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Outcome {
    let out = train(&cfg.train_config()?)?;
    let last = out.records.last().map_or(f64::NAN, |r| r.total_loss);
    println!("trained {} steps, final loss {last:.5}", out.records.len());
    println!("checkpoint {}", out.checkpoint.display());
    println!("log {}", out.log.display());
    Ok(())
}

fn predict(cfg: &RunConfig, checkpoint: &Path, split: Split, noise_std: f64) -> Outcome {
    let manifest = Manifest::load(&cfg.manifest_path())?;
    let (net, _) = SegNet::<f32>::load_checkpoint(checkpoint)?;
    let sweep = cfg.sweep_config();
    let dir = cfg.out_dir.join("predictions");
    create_dir(&dir)?;
    for (i, e) in entries(&manifest, split).iter().enumerate() {
        let image = read_image(&manifest.resolve(&e.image))?;
        let seed = noise_seed(sweep.seed, i as u64, noise_std, 0);
        let pred = predict_sample(&net, &manifest, &image, &sweep, noise_std, seed)?;
        let path = dir.join(format!("{}.vol", e.id));
        write_volume(&pred, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split, stds: Option<Vec<f64>>, file: &str) -> Outcome {
    let manifest = Manifest::load(&cfg.manifest_path())?;
    let (net, _) = SegNet::<f32>::load_checkpoint(checkpoint)?;
    let sweep = SweepConfig {
        noise_stds: stds.unwrap_or_else(|| cfg.sweep.noise_stds.clone()),
        ..cfg.sweep_config()
    };
    let records = evaluate_dataset(&net, &manifest, entries(&manifest, split), &sweep)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(file);
    write_records_csv(&records, &path)?;
    for std in &sweep.noise_stds {
        let d: Vec<f64> = records.iter().filter(|r| r.noise_std == *std).map(|r| r.dsc).collect();
        println!("noise std {std}: mean DSC {:.4} over {} records", d.iter().sum::<f64>() / d.len() as f64, d.len());
    }
    println!("{}", path.display());
    Ok(())
}

fn compare(a: &Path, b: &Path, name_a: &str, name_b: &str, out_dir: &Path) -> Outcome {
    let ra = read_records_csv(a)?;
    let rb = read_records_csv(b)?;
    let table = compare_models(&ra, &rb, name_a, name_b)?;
    create_dir(out_dir)?;
    table.write_csv(&out_dir.join("compare.csv"))?;
    table.write_summary(&out_dir.join("compare_summary.json"))?;
    println!("{:>10} {:>8} {:>12} {:>10}", "noise_std", "organ", "improvement", "p");
    for r in &table.rows {
        let organ = r.organ.map_or_else(|| "average".to_string(), |o| o.to_string());
        println!("{:>10} {:>8} {:>12.4} {:>10.4}", r.noise_std, organ, r.improvement, r.p_value);
    }
    Ok(())
}

fn grad_check(seeds: u64, fault: Option<String>) -> Outcome {
    let fault = match fault {
        Some(name) => Some(op_by_name(&name).ok_or_else(|| Failure::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    let report = run_grad_check(&GradCheckOptions {
        seeds,
        fault,
        ..GradCheckOptions::default()
    })?;
    for o in &report.ops {
        let verdict = if o.passed { "ok" } else { "FAIL" };
        println!("{:<20} max_rel_err {:.3e}  {verdict}", o.op, o.max_rel_err);
    }
    println!("tolerance {:.0e}, {} seeds, {:.1}s", report.tolerance, seeds, report.elapsed_s);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn init_threads() -> Outcome {
    let n = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Failure::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Outcome {
    init_threads()?;
    match cli.command {
        Command::GenData { config } => gen_data(&load_config(&config)?),
        Command::Train { config } => run_train(&load_config(&config)?),
        Command::Predict {
            config,
            checkpoint,
            split,
            noise_std,
        } => predict(&load_config(&config)?, &checkpoint, split, noise_std),
        Command::Eval {
            config,
            checkpoint,
            split,
            noise_std,
        } => evaluate(&load_config(&config)?, &checkpoint, split, Some(vec![noise_std]), "metrics.csv"),
        Command::Sweep {
            config,
            checkpoint,
            split,
        } => evaluate(&load_config(&config)?, &checkpoint, split, None, "sweep.csv"),
        Command::Compare {
            a,
            b,
            name_a,
            name_b,
            out_dir,
        } => compare(&a, &b, &name_a, &name_b, &out_dir),
        Command::GradCheck { seeds, fault } => grad_check(seeds, fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
