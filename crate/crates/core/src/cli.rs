//! Command-line surface. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::clinical::ClinicalVocabulary;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::gradcheck::{check_model_gradients, reduced_variant};
use crate::persist::{load_model, save_model, write_atomic};
use crate::synth::{gen_synth, SynthSpec};
use crate::trainer::{evaluate_masked, score_samples, train};

/// Exit code when `gradcheck` finds an error above its threshold.
pub const EXIT_GRADCHECK_FAILED: i32 = 10;

#[derive(Debug, Parser)]
#[command(name = "mmfusion", version, about = "Image/clinical fusion training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.bin and history.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<FusionKind>,
        /// Probability of dropping a sample's clinical data during training.
        #[arg(long = "mask-p")]
        mask_p: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a model; writes report.json and summary.tsv.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to <out>/model.bin.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to the config's test_data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "mask-p", default_value_t = 0.0)]
        mask_p: f64,
        /// Seed for test-time masking; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print class probabilities for each row of a dataset file.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate synthetic train.csv/test.csv from a spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check at reduced dimensions.
    Gradcheck {
        #[arg(long)]
        variant: FusionKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            config,
            seed,
            variant,
            mask_p,
            out,
        } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                config.training.seed = seed;
            }
            if let Some(kind) = variant {
                config.model.kind = kind;
            }
            if let Some(p) = mask_p {
                config.training.mask_probability = p;
            }
            config.validate()?;
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            let vocab = config.load_vocabulary()?;
            let samples = config.load_samples(&config.train_data, &vocab)?;
            let (model, history) = train(&samples, &config.model, &config.training)?;
            save_model(&model, &out.join("model.bin"))?;
            write_atomic(&out.join("history.csv"), history.to_csv().as_bytes())?;
            if let Some(last) = history.epochs.last() {
                println!(
                    "trained {} for {} epochs, final train loss {:.6}",
                    config.model.kind,
                    history.epochs.len(),
                    last.train_loss
                );
            }
            println!("wrote {}", out.join("model.bin").display());
            Ok(0)
        }
        Command::Evaluate {
            config,
            model,
            data,
            mask_p,
            seed,
            out,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            let model_path = model.unwrap_or_else(|| out.join("model.bin"));
            let model = load_model(&model_path)?;
            check_model_matches(&config, model.variant().image_dim, model.variant().num_classes)?;
            let data = data
                .or_else(|| config.test_data.clone())
                .ok_or_else(|| Error::Config("no --data given and config has no test_data".into()))?;
            let vocab = config.load_vocabulary()?;
            let samples = config.load_samples(&data, &vocab)?;
            let seed = seed.unwrap_or(config.training.seed);
            let report = evaluate_masked(&model, &samples, &config.class_names, mask_p, seed)?;
            write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
            let table = report.summary_table();
            write_atomic(&out.join("summary.tsv"), table.as_bytes())?;
            print!("{table}");
            Ok(0)
        }
        Command::Predict {
            config,
            model,
            input,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let model = load_model(&model)?;
            check_model_matches(&config, model.variant().image_dim, model.variant().num_classes)?;
            let vocab = config.load_vocabulary()?;
            let samples = config.load_samples(&input, &vocab)?;
            let refs: Vec<_> = samples.iter().collect();
            let clinical: Vec<_> = samples.iter().map(|s| s.clinical.clone()).collect();
            let (scored, _) = score_samples(&model, &refs, &clinical)?;
            let mut text = format!("id\t{}\n", config.class_names.join("\t"));
            for (s, scored) in samples.iter().zip(&scored) {
                let probs: Vec<String> = scored.probs.iter().map(|p| format!("{p:.6}")).collect();
                let _ = writeln!(text, "{}\t{}", s.id, probs.join("\t"));
            }
            print!("{text}");
            Ok(0)
        }
        Command::GenSynth {
            spec,
            vocab,
            seed,
            out,
        } => {
            let mut spec = SynthSpec::load(&spec)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let vocab = match vocab {
                Some(p) => ClinicalVocabulary::load(&p)?,
                None => ClinicalVocabulary::default(),
            };
            let (train, test) = gen_synth(&spec, &vocab, &out)?;
            println!("wrote {} and {}", train.display(), test.display());
            Ok(0)
        }
        Command::Gradcheck {
            variant,
            seed,
            seeds,
            epsilon,
            threshold,
        } => {
            let arch = reduced_variant(variant);
            let mut worst: f64 = 0.0;
            for s in seed..seed + seeds.max(1) {
                let report = check_model_gradients(&arch, s, epsilon)?;
                println!(
                    "{variant} seed {s}: max relative error {:.3e} over {} entries",
                    report.max_relative_error, report.entries_checked
                );
                worst = worst.max(report.max_relative_error);
            }
            if worst > threshold {
                eprintln!("gradient check failed: {worst:.3e} > {threshold:.1e}");
                return Ok(EXIT_GRADCHECK_FAILED);
            }
            Ok(0)
        }
    }
}

fn check_model_matches(config: &ExperimentConfig, image_dim: usize, num_classes: usize) -> Result<()> {
    if image_dim != config.model.image_dim || num_classes != config.class_names.len() {
        return Err(Error::Config(format!(
            "model expects image_dim {image_dim} and {num_classes} classes; config has {} and {}",
            config.model.image_dim,
            config.class_names.len()
        )));
    }
    Ok(())
}

/// Runs with `args` following the program name.
pub fn run_with(args: &[&str]) -> i32 {
    run(std::iter::once("mmfusion").chain(args.iter().copied()))
}
