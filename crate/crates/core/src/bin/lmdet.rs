use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmdet::ablate::{ablate, Grid};
use lmdet::bench::{bench_model, BenchSettings};
use lmdet::checkpoint::{stored_precision, Checkpoint};
use lmdet::config::{DataConfig, QaMemVariant, RunConfig};
use lmdet::data::Dataset;
use lmdet::dataset;
use lmdet::train::{evaluate, train, Evaluation};
use lmdet::{Error, Precision, Result, Scalar};

#[derive(Parser)]
#[command(name = "lmdet", version, about = "Facial landmark detection with a transformer decoder head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Overrides the run seed (`train.seed`; `data.seed` for generated eval data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for computation.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Directory for outputs.
    #[arg(long, global = true, default_value = "lmdet-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, config.txt and checkpoint/.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` config override; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset directory or on the test split
    /// generated from a config file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and score every variant of a grid file.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Measure inference throughput of a checkpoint.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "efficient")]
        variant: QaMemVariant,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Timed batches; the median is reported.
        #[arg(long, default_value_t = 7)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Generate a dataset and export it to the output directory.
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn print_eval(e: &Evaluation, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|err| Error::Io {
        path: out_dir.into(),
        source: err,
    })?;
    let mut csv = String::from("index,nme_percent\n");
    for (i, v) in e.per_sample.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", v.map_or("excluded".to_string(), |v| v.to_string())));
    }
    let path = out_dir.join("per_sample_nme.csv");
    std::fs::write(&path, csv).map_err(|err| Error::Io { path: path.clone(), source: err })?;
    println!("nme_percent = {}", e.nme_percent);
    println!("scored = {}", e.per_sample.len() - e.excluded);
    println!("excluded = {}", e.excluded);
    println!("per_sample = {}", path.display());
    Ok(())
}

fn run_train<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let data = Dataset::generate(&cfg.data)?;
    let outcome = train::<T>(cfg, &data, Some(out_dir))?;
    let best = &outcome.best;
    println!("initial_test_nme_percent = {}", outcome.initial_test_nme_percent);
    println!("best_epoch = {}", best.epoch);
    println!("best_test_nme_percent = {}", best.history[best.epoch - 1].test_nme_percent);
    println!("out_dir = {}", out_dir.display());
    Ok(())
}

fn run_eval<T: Scalar>(ckpt: &Path, data: &Path, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(ckpt)?;
    let (data_cfg, ds): (DataConfig, Dataset) = if data.is_dir() {
        dataset::import(data)?
    } else {
        let mut cfg = RunConfig::from_file(data)?.data;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let ds = Dataset::generate(&cfg)?;
        (cfg, ds)
    };
    let m = ckpt.model.config();
    if m.num_landmarks != data_cfg.num_landmarks || m.image_size != data_cfg.image_size || m.in_channels != data_cfg.in_channels {
        return Err(Error::Config(format!(
            "checkpoint model (N={}, {}px, {}ch) does not match data (N={}, {}px, {}ch)",
            m.num_landmarks, m.image_size, m.in_channels, data_cfg.num_landmarks, data_cfg.image_size, data_cfg.in_channels
        )));
    }
    let e = evaluate(&ckpt.model, &ds.test, ds.eye_indices)?;
    print_eval(&e, out_dir)
}

fn run_bench<T: Scalar>(ckpt: &Path, variant: QaMemVariant, settings: BenchSettings, seed: u64) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(ckpt)?;
    let t = bench_model(&ckpt.model, variant, settings, seed)?;
    let m = ckpt.model.config();
    println!("variant = {}", variant.as_str());
    println!("precision = {}", T::PRECISION);
    println!("batch = {}", settings.batch);
    println!("warmup_batches = {} (excluded from timing)", settings.warmup);
    println!("timed_batches = {}", settings.runs);
    println!("images_per_sec_median = {}", t.images_per_sec);
    println!(
        "images_per_sec_runs = {}",
        t.per_run.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(",")
    );
    println!(
        "qamem_flop_estimate = {} (N={}, S={}, d={}, per image per decoder layer)",
        t.flop_estimate,
        m.num_landmarks,
        m.memory_len(),
        m.hidden_dim
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let Common {
        seed,
        precision,
        out_dir,
    } = cli.common;
    match cli.command {
        Command::Train { config, overrides } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(p) = precision {
                cfg.train.precision = p;
            }
            cfg.validate()?;
            match cfg.train.precision {
                Precision::F32 => run_train::<f32>(&cfg, &out_dir),
                Precision::F64 => run_train::<f64>(&cfg, &out_dir),
            }
        }
        Command::Eval { ckpt, data } => match precision.map_or_else(|| stored_precision(&ckpt), Ok)? {
            Precision::F32 => run_eval::<f32>(&ckpt, &data, seed, &out_dir),
            Precision::F64 => run_eval::<f64>(&ckpt, &data, seed, &out_dir),
        },
        Command::Ablate { grid } => {
            let mut grid = Grid::from_file(&grid)?;
            if let Some(s) = seed {
                let n = grid.seeds.len() as u64;
                grid.seeds = (s..s + n).collect();
            }
            if let Some(p) = precision {
                for v in &mut grid.variants {
                    v.config.train.precision = p;
                }
            }
            let report = ablate(&grid, Some(&out_dir), |line| eprintln!("{line}"))?;
            for r in &report.rows {
                println!(
                    "{}: NME {:.4}% ± {:.4} ({} seeds), {:.1} img/s, {} params",
                    r.name,
                    r.nme_mean,
                    r.nme_std,
                    r.seeds.len(),
                    r.images_per_sec,
                    r.param_count
                );
            }
            println!("report = {}", out_dir.join(lmdet::ablate::REPORT_CSV).display());
            println!("plot = {}", out_dir.join(lmdet::ablate::REPORT_PLOT).display());
            Ok(())
        }
        Command::Bench {
            ckpt,
            variant,
            batch,
            iterations,
            warmup,
        } => {
            let settings = BenchSettings {
                batch,
                warmup,
                runs: iterations,
            };
            let seed = seed.unwrap_or(0);
            match precision.map_or_else(|| stored_precision(&ckpt), Ok)? {
                Precision::F32 => run_bench::<f32>(&ckpt, variant, settings, seed),
                Precision::F64 => run_bench::<f64>(&ckpt, variant, settings, seed),
            }
        }
        Command::Dataset { config, overrides } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let ds = Dataset::generate(&cfg.data)?;
            dataset::export(&ds, &cfg.data, &out_dir)?;
            println!("dataset = {}", out_dir.display());
            println!("config_hash = {}", cfg.data.hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
