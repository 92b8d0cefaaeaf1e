use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cats_core::checkpoint::Checkpoint;
use cats_core::checks::{run_suite, CheckOptions, Suite};
use cats_core::config::KeyValues;
use cats_core::data::{read_volume, write_dataset, write_volume, Subset};
use cats_core::train::{self, RunConfig, CONFIG_KEYS};
use cats_core::{Error, Mode, Result};

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "cats", version, about = "Hybrid CNN + shifted-window transformer segmentation for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.steps=50 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, labels, manifest.csv)
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target directory (default: <out_dir>/data)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and test its best checkpoint
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on one subset of the configured data
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "test")]
        subset: String,
    },
    /// Train every mode with the same seeds and compare test Dice
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "hybrid,cnn_only,swin_only")]
        modes: String,
    },
    /// Segment one image volume
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (.cv2v, float)
        #[arg(long)]
        input: PathBuf,
        /// Output label volume (.cv2v, u8)
        #[arg(long)]
        output: PathBuf,
    },
    /// Run self-check suites against reference implementations
    Check {
        /// geometry, attention, gradients, kernels, metrics, io or all
        #[arg(default_value = "all")]
        suite: String,
        /// Corrupt the fixtures; every suite should then fail
        #[arg(long)]
        inject_fault: bool,
    },
    /// List every config key with its default
    Keys,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    let mut kv = KeyValues::parse(&text)?;
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(RunConfig::from_keys(kv)?.with_env())
}

fn say(line: &str) {
    eprintln!("{line}");
}

fn run(cmd: Command) -> std::result::Result<bool, Failure> {
    match cmd {
        Command::Generate { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let spec = match &cfg.data {
                train::DataSource::Synthetic(s) => s.clone(),
                train::DataSource::Directory(d) => {
                    return Err(Error::Config(format!(
                        "data.dir is set to {}; generate needs synthetic data keys",
                        d.display()
                    ))
                    .into())
                }
            };
            let root = out.unwrap_or_else(|| cfg.out_dir.join("data"));
            let ds = write_dataset(&root, &spec, cfg.split)?;
            let count = |s| ds.entries(s).count();
            println!(
                "wrote {} cases to {} (train {}, val {}, test {})",
                ds.entries.len(),
                root.display(),
                count(Subset::Train),
                count(Subset::Val),
                count(Subset::Test)
            );
        }
        Command::Train { cfg } => {
            let cfg = load_config(&cfg)?;
            let data = train::load_samples(&cfg)?;
            say(&format!(
                "cases: train {}, val {}, test {}",
                data.train.len(),
                data.val.len(),
                data.test.len()
            ));
            let out = train::train(&cfg, &data, Some(&cfg.out_dir), &mut say)?;
            if let Some(b) = &out.best {
                say(&format!("best validation mean dice {:.4} at step {}", b.val_dice, b.step));
            }
            if !data.test.is_empty() {
                let report = train::evaluate(&out.best_model()?, &data.test)?;
                train::write_report(&cfg.out_dir, "test", &report)?;
                print!("{}", report.summary_table());
            }
            println!("checkpoints in {}", cfg.out_dir.display());
        }
        Command::Eval {
            cfg,
            checkpoint,
            subset,
        } => {
            let mut cfg = load_config(&cfg)?;
            let subset: Subset = subset.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            cfg.model = ck.config.clone();
            let data = train::load_samples(&cfg)?;
            let report = train::evaluate(&ck.to_model()?, data.get(subset))?;
            train::write_report(&cfg.out_dir, subset.as_str(), &report)?;
            for (id, msg) in &report.errors {
                say(&format!("skipped {id}: {msg}"));
            }
            print!("{}", report.summary_table());
        }
        Command::Ablate { cfg, modes } => {
            let cfg = load_config(&cfg)?;
            let modes = Mode::parse_list(&modes)?;
            let data = train::load_samples(&cfg)?;
            let report = train::ablate(&cfg, &data, &modes, Some(&cfg.out_dir), &mut say)?;
            print!("{}", report.render());
        }
        Command::Predict {
            checkpoint,
            input,
            output,
        } => {
            let model = Checkpoint::load(&checkpoint)?.to_model()?;
            let image = read_volume::<f32>(&input)?;
            let labels = model.predict(&image)?;
            write_volume(&output, &labels)?;
            println!("wrote {}", output.display());
        }
        Command::Check { suite, inject_fault } => {
            let suites = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse().map_err(|e: Error| Failure {
                    kind: "usage",
                    message: e.to_string(),
                })?]
            };
            let mut ok = true;
            for s in suites {
                let report = run_suite(s, CheckOptions { inject_fault });
                print!("{}", report.render());
                ok &= report.passed();
            }
            return Ok(ok);
        }
        Command::Keys => {
            for (key, default, doc) in CONFIG_KEYS {
                println!("{key:<22} {default:<16} {doc}");
            }
        }
    }
    Ok(true)
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let message = message.replace('\n', " ");
    eprintln!("cats: error kind={kind} message={message:?}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail("usage", &e.kind().to_string());
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => fail("check", "one or more checks failed"),
        Err(f) => fail(f.kind, &f.message),
    }
}
