//! Command-line interface. [`run`] returns the process exit code:
//! 0 success, 1 usage, 2 I/O or unreadable input, 3 validation failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gradcheck::standard_suite;
use crate::harness::{
    ablation_suite, generate_dataset, load_checkpoint, load_dataset, save_checkpoint,
    save_dataset, train, DataConfig, KindMix, Model, RunConfig,
};
use crate::metrics::{evaluate_pair, BinaryMask};
use crate::pgm::Pgm;
use crate::ph::{compute_ph0, Connectivity, PersistenceDiagram, ScalarMap};
use crate::tensor::Tensor;
use crate::tpg::compute_prior;
use crate::VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "topoconv", version, about = "Topology-guided conformable convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// 0-dimensional persistence diagram of an image's superlevel filtration.
    Ph {
        image: PathBuf,
        /// Keep only pairs with persistence above this value.
        #[arg(long)]
        tau0: Option<f64>,
        #[arg(long, default_value = "4", value_parser = ["4", "8"])]
        connectivity: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binary and dilated topological prior of an image.
    Prior {
        image: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dilated: Option<PathBuf>,
    },
    /// Compare a prediction (PGM or TNSR probabilities) with a ground-truth mask.
    Metrics {
        prediction: PathBuf,
        ground_truth: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        /// ring, curve, blobs, ring_curve or mix
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network on a dataset directory and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component and layer-count ablations on generated data.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Json(_) | Error::Format { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

/// Parse `args` (including the program name) and execute.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn provenance(command: &str, config: Value) -> Value {
    json!({ "tool": VERSION, "command": command, "config": config })
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn required(p: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("{flag} is required (flag or config)")))
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Ph {
            image,
            tau0,
            connectivity,
            out,
        } => {
            if let Some(t) = tau0 {
                if !(t >= 0.0) {
                    return Err(Error::invalid(format!("tau0 must be >= 0, got {t}")));
                }
            }
            let conn = Connectivity::from_number(connectivity.parse().expect("validated"))?;
            let img = Pgm::read(&image)?;
            let map = ScalarMap::normalized(img.height, img.width, &img.to_unit_tensor().into_data())?;
            let pd = compute_ph0(&map, conn);
            let pd = match tau0 {
                Some(t) => PersistenceDiagram {
                    pairs: pd.pairs.into_iter().filter(|p| p.persistence() > t).collect(),
                },
                None => pd,
            };
            fs::write(&out, pd.to_csv())?;
            let cfg = json!({ "image": image, "tau0": tau0, "connectivity": connectivity });
            write_json(&sidecar(&out), &provenance("ph", cfg))?;
            writeln!(stdout, "{} pairs", pd.len())?;
        }
        Command::Prior {
            image,
            config,
            out,
            dilated,
        } => {
            let cfg = load_config(&config)?;
            let img = Pgm::read(&image)?;
            let x = img.to_unit_tensor().reshape(&[1, 1, img.height, img.width])?;
            let trace = compute_prior(&x, &cfg.train.tpg)?;
            let note = serde_json::to_string(&provenance("prior", serde_json::to_value(&cfg)?))?;
            Pgm::from_unit_tensor(trace.binary.tensor())?
                .with_comment(&note)
                .write(&out)?;
            if let Some(d) = dilated {
                Pgm::from_unit_tensor(trace.dilated.tensor())?
                    .with_comment(&note)
                    .write(&d)?;
            }
            writeln!(stdout, "{} prior pixels", trace.binary.count_nonzero())?;
        }
        Command::Metrics {
            prediction,
            ground_truth,
            threshold,
            out,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::invalid(format!("threshold {threshold} outside [0,1]")));
            }
            let gt: BinaryMask = Pgm::read(&ground_truth)?.to_mask();
            let prob = if prediction.extension().is_some_and(|e| e == "tnsr") {
                Tensor::read_tnsr(fs::File::open(&prediction)?)?
            } else {
                Pgm::read(&prediction)?.to_unit_tensor()
            };
            let report = evaluate_pair(&prob, &gt, threshold)?;
            let mut v = serde_json::to_value(report)?;
            let cfg = json!({
                "prediction": prediction,
                "ground_truth": ground_truth,
                "threshold": threshold,
            });
            v["provenance"] = provenance("metrics", cfg);
            write_json(&out, &v)?;
            writeln!(stdout, "dice {:.4} betti0_error {}", report.dice, report.betti0_error)?;
        }
        Command::GenData {
            n,
            kind,
            seed,
            size,
            noise,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut data: DataConfig = cfg.data;
            if let Some(n) = n {
                data.n = n;
            }
            if let Some(k) = kind {
                data.kind = KindMix::parse(&k)?;
            }
            if let Some(s) = seed {
                data.seed = s;
            }
            if let Some(s) = size {
                data.height = s;
                data.width = s;
            }
            if let Some(s) = noise {
                data.noise_sigma = s;
            }
            let out = required(out.or(cfg.data_dir.clone()), "--out")?;
            let samples = generate_dataset(&data)?;
            let note = serde_json::to_string(&provenance("gen-data", serde_json::to_value(data)?))?;
            save_dataset(&out, &samples, Some(&data), &note)?;
            writeln!(stdout, "wrote {} samples to {}", samples.len(), out.display())?;
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let data_dir = required(data.or(cfg.data_dir.clone()), "--data")?;
            let out = required(out.or(cfg.out_dir.clone()), "--out")?;
            let samples = load_dataset(&data_dir)?;
            let mut model = Model::new(&cfg.train)?;
            let report = train(&cfg.train, &mut model, &samples)?;
            let prov = provenance("train", serde_json::to_value(&cfg)?);
            save_checkpoint(&out, &model, &cfg.train, prov.clone())?;
            let mut v = serde_json::to_value(&report)?;
            v["provenance"] = prov;
            v["training_samples"] = json!(samples.len());
            write_json(&out.join("train_report.json"), &v)?;
            writeln!(
                stdout,
                "trained {} epochs: loss {:.4} -> {:.4}",
                report.epoch_losses.len(),
                report.initial_loss(),
                report.final_loss()
            )?;
        }
        Command::Eval {
            ckpt,
            data,
            threshold,
            out,
        } => {
            let (mut model, manifest) = load_checkpoint(&ckpt)?;
            let samples = load_dataset(&data)?;
            let threshold = threshold.unwrap_or(crate::metrics::DEFAULT_THRESHOLD);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::invalid(format!("threshold {threshold} outside [0,1]")));
            }
            let report = crate::harness::evaluate(&mut model, &samples, threshold)?;
            let mut v = serde_json::to_value(&report)?;
            v["provenance"] = provenance(
                "eval",
                json!({
                    "checkpoint": ckpt,
                    "data": data,
                    "threshold": threshold,
                    "checkpoint_config": manifest.config,
                }),
            );
            write_json(&out, &v)?;
            writeln!(
                stdout,
                "dice {:.4} betti0_error {:.3}",
                report.mean.dice, report.mean.betti0_error
            )?;
        }
        Command::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let table = ablation_suite(&cfg)?;
            let mut v = serde_json::to_value(&table)?;
            v["provenance"] = provenance("ablate", serde_json::to_value(&cfg)?);
            write_json(&out, &v)?;
            write!(stdout, "{}", table.to_markdown())?;
        }
        Command::Gradcheck { out } => {
            let reports = standard_suite()?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += !r.passed() as usize;
                writeln!(
                    stdout,
                    "{status:4} {:28} rel {:.2e} (tol {:.0e}) checked {} skipped {}",
                    r.name, r.max_rel_error, r.tolerance, r.checked, r.skipped
                )?;
            }
            if let Some(out) = out {
                let v = json!({ "reports": reports, "provenance": provenance("gradcheck", Value::Null) });
                write_json(&out, &v)?;
            }
            if failed > 0 {
                writeln!(stdout, "{failed} gradient check(s) failed")?;
                return Ok(EXIT_INVALID);
            }
        }
    }
    Ok(EXIT_OK)
}
