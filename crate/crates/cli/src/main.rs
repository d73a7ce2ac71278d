//! Command-line front end. Exit codes: 0 success, 1 usage error,
//! 2 validation/run failure, 3 acceptance-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quantlab::attack::{build_attack_datasets, intuitive_joint_train};
use quantlab::defense::{
    metric_asr, metric_cda, nc_report, strip_detection, ModelRef, NcConfig, StripConfig,
};
use quantlab::harness::{
    render_summary, run_pipeline, write_joint_curves_csv, write_pgm, write_strip_entropies_csv,
    ExperimentConfig,
};
use quantlab::nn::{load_model, save_float_model, save_quantized_model, train_clean, LoadedModel, Optimizer};
use quantlab::quant::quantize_model;
use quantlab::tensor::Precision;

#[derive(Parser)]
#[command(name = "quantlab", version, about = "int-8 quantization backdoor laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean baseline model from a config.
    TrainClean {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full attack pipeline: baseline, both stages, conversion,
    /// metrics, optional defenses and the calibration sweep.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a saved float model with the config's calibration batch.
    Quantize {
        #[arg(long)]
        config: PathBuf,
        /// Float model container to convert.
        #[arg(long)]
        model: PathBuf,
        /// Destination for the quantized container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model (float or quantized): prints CDA and ASR.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Entropy-blend screening of a saved model; writes the entropy CSV.
    DefendStrip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trigger reverse-engineering of a saved model; writes the JSON report
    /// and per-class mask images.
    DefendNc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// "all" or a single class index.
        #[arg(long, default_value = "all")]
        classes: String,
    },
    /// Train the single-loss joint baseline and export its curves.
    JointBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epoch budget (defaults to stage1 + stage2 epochs).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render a run directory's persisted summary; exits 3 if any audited
    /// invariant failed.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are successes, everything else is usage
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> quantlab::Result<ExitCode> {
    match cli.command {
        Command::TrainClean { config, out } => {
            let cfg = override_out(ExperimentConfig::load(&config)?, out);
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (train, test) = cfg.load_dataset()?;
            let mut model = quantlab::nn::Model::by_architecture_id(
                &cfg.architecture_id,
                &[train.image_dims().0, train.image_dims().1, train.image_dims().2],
                train.num_classes,
                Precision::F32,
                cfg.dataset.seed,
            )?;
            let mut opt = Optimizer::adam(cfg.attack.stage1_lr);
            let log = train_clean(
                &mut model,
                &train,
                cfg.clean_epochs,
                cfg.attack.batch_size,
                &mut opt,
                Some(&test),
                cfg.dataset.seed,
            )?;
            save_float_model(&model, &cfg.output_dir.join("m_cl.qlm"))?;
            for (i, cda) in log.epoch_cda.iter().enumerate() {
                println!("epoch {i}: cda {cda:.4}");
            }
            println!("saved {}", cfg.output_dir.join("m_cl.qlm").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack { config, out } => {
            let cfg = override_out(ExperimentConfig::load(&config)?, out);
            let summary = run_pipeline(&cfg)?;
            let (text, _) = render_summary(&cfg.output_dir)?;
            println!("{text}");
            if summary.failure.is_some() {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Quantize { config, model, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let LoadedModel::Float(m) = load_model(&model)? else {
                return Err(quantlab::Error::Config("quantize expects a float container".into()));
            };
            let (train, _) = cfg.load_dataset()?;
            let calibration =
                quantlab::quant::calibration_batch(&train, cfg.attack.calibration_count, cfg.dataset.seed);
            let qm = quantize_model(&m, &calibration, cfg.quantization.profile)?;
            save_quantized_model(&qm, &out)?;
            println!("saved {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, model } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let (_, test) = cfg.load_dataset()?;
            let loaded = load_model(&model)?;
            let (cda, asr) = match &loaded {
                LoadedModel::Float(m) => (
                    metric_cda(ModelRef::Float(m), &test)?,
                    metric_asr(ModelRef::Float(m), &test, &cfg.trigger)?,
                ),
                LoadedModel::Quantized(q) => (
                    metric_cda(ModelRef::Quantized(q), &test)?,
                    metric_asr(ModelRef::Quantized(q), &test, &cfg.trigger)?,
                ),
            };
            println!("cda {cda:.4}");
            println!("asr {asr:.4}");
            Ok(ExitCode::SUCCESS)
        }
        Command::DefendStrip { config, model, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let (_, test) = cfg.load_dataset()?;
            let order = test.epoch_order(cfg.dataset.seed ^ 0x57A1, 0);
            let probe_n = (test.len() / 2).min(200);
            let pool_n = (test.len() - probe_n).min(200);
            let probe = test.subset(&order[..probe_n]);
            let pool = test.subset(&order[probe_n..probe_n + pool_n]);
            let strip_cfg = StripConfig { seed: cfg.dataset.seed, ..StripConfig::default() };
            let loaded = load_model(&model)?;
            let result = match &loaded {
                LoadedModel::Float(m) => {
                    strip_detection(ModelRef::Float(m), &probe, &pool, &cfg.trigger, &strip_cfg)?
                }
                LoadedModel::Quantized(q) => {
                    strip_detection(ModelRef::Quantized(q), &probe, &pool, &cfg.trigger, &strip_cfg)?
                }
            };
            write_strip_entropies_csv(&out.join("strip_entropies.csv"), &result)?;
            let summary = serde_json::json!({
                "boundary": result.boundary,
                "separation": result.separation,
                "false_rejection_rate": result.false_rejection_rate,
                "false_acceptance_rate": result.false_acceptance_rate,
            });
            std::fs::write(out.join("strip.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
            println!("separation {:.3} (boundary {:.4})", result.separation, result.boundary);
            Ok(ExitCode::SUCCESS)
        }
        Command::DefendNc { config, model, out, classes } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let (_, test) = cfg.load_dataset()?;
            let order = test.epoch_order(cfg.dataset.seed ^ 0x4C0, 0);
            let clean = test.subset(&order[..test.len().min(256)]);
            let nc_cfg = NcConfig { seed: cfg.dataset.seed, ..NcConfig::default() };
            let loaded = load_model(&model)?;
            let mref = match &loaded {
                LoadedModel::Float(m) => ModelRef::Float(m),
                LoadedModel::Quantized(q) => ModelRef::Quantized(q),
            };
            let report = if classes == "all" {
                nc_report(mref, test.num_classes, &clean, &nc_cfg)?
            } else {
                let k: usize = classes
                    .parse()
                    .map_err(|_| quantlab::Error::Config(format!("bad --classes value {classes:?}")))?;
                let single = quantlab::defense::nc_reverse_trigger(mref, k, &clean, &nc_cfg)?;
                quantlab::defense::NcReport {
                    anomaly: vec![0.0; 1],
                    flagged: vec![],
                    per_class: vec![single],
                }
            };
            let json = serde_json::json!({
                "l1_per_class": report.per_class.iter().map(|c| c.l1).collect::<Vec<_>>(),
                "anomaly_per_class": report.anomaly,
                "flagged": report.flagged,
            });
            std::fs::write(out.join("nc.json"), serde_json::to_string_pretty(&json).expect("json"))?;
            for r in &report.per_class {
                write_pgm(&out.join(format!("nc_mask_{}.pgm", r.target_class)), &r.mask)?;
            }
            println!(
                "max anomaly {:.2}, min-l1 class {}",
                report.max_anomaly(),
                report.min_l1_class()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::JointBaseline { config, out, epochs } => {
            let cfg = override_out(ExperimentConfig::load(&config)?, out);
            cfg.validate()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (train, test) = cfg.load_dataset()?;
            let ds = build_attack_datasets(&train, &cfg.trigger, &cfg.attack)?;
            let mut model = quantlab::nn::Model::by_architecture_id(
                &cfg.architecture_id,
                &[train.image_dims().0, train.image_dims().1, train.image_dims().2],
                train.num_classes,
                Precision::F32,
                cfg.dataset.seed,
            )?;
            let budget = epochs.unwrap_or(cfg.attack.stage1_epochs + cfg.attack.stage2_epochs);
            let log = intuitive_joint_train(&mut model, &ds, &cfg.attack, cfg.quantization.profile, &test, budget)?;
            write_joint_curves_csv(&cfg.output_dir.join("joint_curves.csv"), &log.rows)?;
            save_float_model(&model, &cfg.output_dir.join("m_joint.qlm"))?;
            for r in &log.rows {
                println!(
                    "epoch {}: cda_fp {:.4} asr_fp {:.4} cda_int8 {:.4} asr_int8 {:.4}",
                    r.epoch, r.cda_fp, r.asr_fp, r.cda_int8, r.asr_int8
                );
            }
            println!("int8 ASR step-std {:.4}", log.int8_asr_step_std());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir } => {
            let (text, all_ok) = render_summary(&dir)?;
            println!("{text}");
            if all_ok {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn override_out(mut cfg: ExperimentConfig, out: Option<PathBuf>) -> ExperimentConfig {
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg
}
