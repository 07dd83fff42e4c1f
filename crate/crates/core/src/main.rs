use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use passion::config::ExperimentConfig;
use passion::data::{apply_presence, generate_dataset, load_container, save_container, DatasetSpec};
use passion::kv::KvMap;
use passion::metrics::{evaluate_combinations, nested_groups, plain_groups, EvalOptions, HdVariant};
use passion::nn::checkpoint;
use passion::presence::{sample_presence, MissingRateVector, PresenceManifest, PresenceMatrix};
use passion::train::run_experiment;

#[derive(Parser)]
#[command(name = "passion", version, about = "Preference-aware self-distillation for incomplete multi-modal segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on every modality subset of a container.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "hd95")]
        hd: HdVariant,
        /// Group classes per region (nested) or score each class alone (plain).
        #[arg(long)]
        plain: bool,
        /// Also write the CSV report here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a synthetic dataset to a container.
    GenData {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Sample a presence matrix and print its manifest.
    GenPresence {
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::parse(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = run_experiment(&cfg)?;
            print!("{}", outcome.report.to_table());
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::Evaluate { checkpoint: ckpt, data, hd, plain, csv } => {
            let model = checkpoint::load(&ckpt)?;
            let (header, samples) = load_container(&data)?;
            if header.n_modalities != model.config().n_modalities {
                bail!(
                    "checkpoint expects {} modalities, data has {}",
                    model.config().n_modalities,
                    header.n_modalities
                );
            }
            let k = model.config().n_classes;
            let groups = if plain { plain_groups(k) } else { nested_groups(k) };
            let opts = EvalOptions {
                variant: hd,
                ..EvalOptions::default()
            };
            let report = evaluate_combinations(&model, &samples, &groups, &opts)?;
            print!("{}", report.to_table());
            if let Some(path) = csv {
                fs::write(&path, report.to_csv())?;
            }
        }
        Command::GenData { spec } => {
            let text = fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let kv = KvMap::parse(&text)?;
            let ds = DatasetSpec::from_kv(&kv, "")?;
            let out: PathBuf = kv.get_str("out").unwrap_or("data.pass").into();
            let mut samples = generate_dataset(&ds)?;
            let manifest = match kv.get_list::<f64>("targets")? {
                Some(t) => {
                    let seed = kv.get_or("presence_seed", ds.seed)?;
                    let draw = sample_presence(&MissingRateVector::new(t.clone())?, ds.n_samples, seed)?;
                    samples = samples
                        .iter()
                        .enumerate()
                        .map(|(n, s)| apply_presence(s, draw.matrix.row(n)))
                        .collect::<passion::Result<_>>()?;
                    PresenceManifest {
                        seed,
                        targets: t,
                        matrix: draw.matrix,
                    }
                }
                None => PresenceManifest {
                    seed: ds.seed,
                    targets: vec![0.0; ds.n_modalities],
                    matrix: PresenceMatrix::full(ds.n_samples, ds.n_modalities)?,
                },
            };
            save_container(&out, &samples, ds.n_modalities, ds.n_classes, ds.shape)?;
            let manifest_path = out.with_extension("manifest");
            fs::write(&manifest_path, manifest.to_text())?;
            println!("wrote {} and {}", out.display(), manifest_path.display());
        }
        Command::GenPresence { targets, n, seed } => {
            let draw = sample_presence(&MissingRateVector::new(targets.clone())?, n, seed)?;
            if draw.repairs > 0 {
                log::warn!("{} all-missing rows repaired", draw.repairs);
            }
            let manifest = PresenceManifest {
                seed,
                targets,
                matrix: draw.matrix,
            };
            print!("{}", manifest.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
