//! Datasets, configuration, pipeline orchestration and report generation:
//! the reproducibility shell around the attack.

mod digits;
mod idx;
mod pipeline;
mod report;
mod synth;

pub use digits::{digits_dataset, elastic_deform};
pub use idx::{load_idx_dataset, save_idx_dataset};
pub use pipeline::{run_pipeline, PipelineArtifacts};
pub use report::{
    fraction_near_integer, load_summary, render_summary, save_summary,
    write_fractional_histogram, write_joint_curves_csv, write_metrics_csv, write_pgm,
    write_strip_entropies_csv,
};
pub use synth::synth_dataset;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attack::{AttackConfig, TriggerSpec};
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::quant::QuantProfile;

/// Where the task's images come from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Procedural 28x28 digit task (IDX-cached); stands in for the real
    /// digit files when they are not present.
    Digits,
    /// Pre-existing IDX files `train-images-idx3-ubyte`,
    /// `train-labels-idx1-ubyte`, `t10k-images-idx3-ubyte`,
    /// `t10k-labels-idx1-ubyte` under `dir`.
    MnistIdx { dir: PathBuf },
    /// Oriented-bar synthetic task.
    Synthetic { classes: usize, dim: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Full-integer quantization with calibrated activations.
    Fiq,
    /// Dynamic-range quantization; activations quantized at inference time.
    Drq,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizationSpec {
    pub profile: QuantProfile,
    pub mode: QuantMode,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DefenseToggles {
    pub strip: bool,
    pub neural_cleanse: bool,
}

/// One experiment, end to end.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub task_id: String,
    pub architecture_id: String,
    pub clean_epochs: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub trigger: TriggerSpec,
    pub attack: AttackConfig,
    pub quantization: QuantizationSpec,
    pub defenses: DefenseToggles,
}

impl ExperimentConfig {
    /// A ready-to-run desk configuration for the digits task.
    pub fn desk_digits(output_dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            task_id: "digits-mini-cnn".into(),
            architecture_id: "mini-cnn".into(),
            clean_epochs: 8,
            output_dir: output_dir.to_path_buf(),
            dataset: DatasetSpec {
                source: DatasetSource::Digits,
                train_size: 10_000,
                test_size: 2_000,
                seed: 42,
            },
            trigger: TriggerSpec::default_square(0),
            attack: AttackConfig::default(),
            quantization: QuantizationSpec { profile: QuantProfile::Tflite127, mode: QuantMode::Fiq },
            defenses: DefenseToggles { strip: true, neural_cleanse: true },
        }
    }

    /// A fast synthetic configuration for continuous integration.
    pub fn ci_synthetic(output_dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            task_id: "synthetic-mini-cnn".into(),
            architecture_id: "mini-cnn".into(),
            clean_epochs: 4,
            output_dir: output_dir.to_path_buf(),
            dataset: DatasetSpec {
                source: DatasetSource::Synthetic { classes: 4, dim: 16 },
                train_size: 2_000,
                test_size: 400,
                seed: 42,
            },
            trigger: TriggerSpec::square(4, 1.0, None, 0),
            attack: AttackConfig {
                poison_count: 100,
                cover_count: 200,
                stage1_epochs: 6,
                stage2_epochs: 12,
                stage2_lr: 4e-5,
                ..AttackConfig::default()
            },
            quantization: QuantizationSpec { profile: QuantProfile::Tflite127, mode: QuantMode::Fiq },
            defenses: DefenseToggles { strip: false, neural_cleanse: false },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_toml(&text)
    }

    /// Check that referenced files exist and sizes are coherent.
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::MnistIdx { dir } = &self.dataset.source {
            for f in [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ] {
                if !dir.join(f).exists() {
                    return Err(Error::Config(format!("missing dataset file {}", dir.join(f).display())));
                }
            }
        }
        if self.dataset.train_size == 0 || self.dataset.test_size == 0 {
            return Err(Error::Config("train/test sizes must be positive".into()));
        }
        self.attack.validate(self.dataset.train_size)?;
        Ok(())
    }

    /// Materialize the train/test sets. The digits task is cached as IDX
    /// files under the output directory and read back through the IDX
    /// loader, so the pipeline always exercises the file path.
    pub fn load_dataset(&self) -> Result<(LabeledImages, LabeledImages)> {
        let seed = self.dataset.seed;
        match &self.dataset.source {
            DatasetSource::Digits => {
                let data_dir = self.output_dir.join("data");
                std::fs::create_dir_all(&data_dir)?;
                let train_raw = digits_dataset(self.dataset.train_size, seed)?;
                let test_raw = digits_dataset(self.dataset.test_size, seed.wrapping_add(1))?;
                let paths = [
                    data_dir.join("train-images-idx3-ubyte"),
                    data_dir.join("train-labels-idx1-ubyte"),
                    data_dir.join("t10k-images-idx3-ubyte"),
                    data_dir.join("t10k-labels-idx1-ubyte"),
                ];
                save_idx_dataset(&train_raw, &paths[0], &paths[1])?;
                save_idx_dataset(&test_raw, &paths[2], &paths[3])?;
                let train = load_idx_dataset(&paths[0], &paths[1])?;
                let test = load_idx_dataset(&paths[2], &paths[3])?;
                Ok((train, test))
            }
            DatasetSource::MnistIdx { dir } => {
                let train = load_idx_dataset(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_idx_dataset(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                let train_idx: Vec<usize> =
                    train.epoch_order(seed, 0).into_iter().take(self.dataset.train_size).collect();
                let test_idx: Vec<usize> =
                    test.epoch_order(seed, 1).into_iter().take(self.dataset.test_size).collect();
                Ok((train.subset(&train_idx), test.subset(&test_idx)))
            }
            DatasetSource::Synthetic { classes, dim } => {
                let train = synth_dataset(*classes, self.dataset.train_size, *dim, seed)?;
                let test = synth_dataset(*classes, self.dataset.test_size, *dim, seed.wrapping_add(1))?;
                Ok((train, test))
            }
        }
    }
}

/// CDA/ASR pair for one model role.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoleMetrics {
    pub cda: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InvariantAudit {
    /// Optimizer steps after which re-conversion disagreed with the snapshot.
    pub preservation_violations: usize,
    pub preservation_ok: bool,
    pub biases_frozen_ok: bool,
    pub trigger_locality_ok: bool,
    pub l2_bounds_ok: bool,
    pub projection_idempotent_ok: bool,
    pub emulator_trace_ok: bool,
}

impl InvariantAudit {
    pub fn all_ok(&self) -> bool {
        self.preservation_ok
            && self.biases_frozen_ok
            && self.trigger_locality_ok
            && self.l2_bounds_ok
            && self.projection_idempotent_ok
            && self.emulator_trace_ok
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StripSummary {
    pub boundary: f64,
    pub separation: f64,
    pub false_rejection_rate: f64,
    pub false_acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NcSummary {
    pub l1_per_class: Vec<f64>,
    pub anomaly_per_class: Vec<f64>,
    pub max_anomaly: f64,
    pub min_l1_class: usize,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DefenseSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strip_fp: Option<StripSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strip_q: Option<StripSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nc_fp: Option<NcSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nc_q: Option<NcSummary>,
}

/// ASR/CDA of the deployed quantized model under each calibration source.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationSweep {
    pub same: RoleMetrics,
    pub similar: RoleMetrics,
    pub different: RoleMetrics,
}

/// Everything a finished (or failed) run wants remembered. The summary only
/// refers to artifacts inside the run directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    pub task_id: String,
    pub architecture_id: String,
    pub quantization: QuantizationSpec,
    /// Keys: m_cl, m_bd, m_rm, m_cl_q, m_bd_q, m_rm_q.
    pub metrics: BTreeMap<String, RoleMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariants: Option<InvariantAudit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defenses: Option<DefenseSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_sweep: Option<CalibrationSweep>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunSummary {
    pub fn acceptance_ok(&self) -> bool {
        self.failure.is_none() && self.invariants.map_or(false, |i| i.all_ok())
    }
}
