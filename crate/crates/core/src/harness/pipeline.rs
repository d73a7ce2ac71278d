//! End-to-end run: clean baseline, the two attack stages, conversion,
//! metrics, the invariant audit, optional defenses and the
//! calibration-sensitivity sweep. Any stage failure is recorded in the
//! summary and later stages are skipped; the summary is always written.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::attack::{
    build_attack_datasets, loss_l2, stage1_train, stage2_finetune, trigger_footprint,
    weight_scales, AttackDatasets, EpochRow, PgdConstraints,
};
use crate::data::LabeledImages;
use crate::defense::{
    metric_asr, metric_cda, nc_report, strip_detection, ModelRef, NcConfig, StripConfig,
};
use crate::error::{Error, Result};
use crate::harness::{
    report, CalibrationSweep, DefenseSummary, ExperimentConfig, InvariantAudit,
    NcSummary, QuantMode, RoleMetrics, RunSummary, StripSummary,
};
use crate::nn::{save_float_model, save_quantized_model, train_clean, Model, Optimizer};
use crate::quant::{quantize_model, DrqModel, QuantizedModel};
use crate::tensor::{Precision, Tape, Tensor};

pub struct PipelineArtifacts {
    pub summary: RunSummary,
    pub m_cl: Model,
    pub m_bd: Model,
    pub m_rm: Model,
    pub m_bd_q: QuantizedModel,
}

macro_rules! stage {
    ($summary:expr, $dir:expr, $name:literal, $body:expr) => {{
        let started = Instant::now();
        let out = $body;
        $summary
            .wall_clock_seconds
            .insert($name.to_string(), started.elapsed().as_secs_f64());
        match out {
            Ok(v) => v,
            Err(e) => {
                $summary.failed_stage = Some($name.to_string());
                $summary.failure = Some(e.to_string());
                report::save_summary(&$dir.join("summary.json"), &$summary)?;
                return Ok(None);
            }
        }
    }};
}

/// Run the configured experiment; artifacts land in `config.output_dir`.
/// Returns the summary (also persisted); a stage failure yields a summary
/// with the failure recorded instead of an error.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunSummary> {
    Ok(match run_pipeline_full(config)? {
        Some(artifacts) => artifacts.summary,
        None => report::load_summary(&config.output_dir.join("summary.json"))?,
    })
}

/// As `run_pipeline`, but hands back the trained models for callers that
/// keep working with them (tests, the joint-baseline comparison).
pub fn run_pipeline_full(config: &ExperimentConfig) -> Result<Option<PipelineArtifacts>> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;

    let mut summary = RunSummary {
        task_id: config.task_id.clone(),
        architecture_id: config.architecture_id.clone(),
        quantization: config.quantization.clone(),
        metrics: BTreeMap::new(),
        invariants: None,
        defenses: None,
        calibration_sweep: None,
        wall_clock_seconds: BTreeMap::new(),
        artifacts: Vec::new(),
        failed_stage: None,
        failure: None,
    };

    let (train, test) = stage!(summary, dir, "dataset", config.load_dataset());
    let profile = config.quantization.profile;

    // clean baseline
    let m_cl = stage!(summary, dir, "train_clean", {
        let mut model = Model::by_architecture_id(
            &config.architecture_id,
            &dims_of(&train),
            train.num_classes,
            Precision::F32,
            config.dataset.seed,
        )?;
        let mut opt = Optimizer::adam(config.attack.stage1_lr);
        train_clean(
            &mut model,
            &train,
            config.clean_epochs,
            config.attack.batch_size,
            &mut opt,
            Some(&test),
            config.dataset.seed,
        )
        .map(|_| model)
    });
    save_float_model(&m_cl, &dir.join("m_cl.qlm"))?;
    summary.artifacts.push("m_cl.qlm".into());

    let ds = stage!(
        summary,
        dir,
        "attack_datasets",
        build_attack_datasets(&train, &config.trigger, &config.attack)
    );

    // stage 1: insert the backdoor (warm start from the clean baseline)
    let (m_bd, log1) = stage!(summary, dir, "stage1", {
        let mut model = m_cl.clone();
        stage1_train(&mut model, &ds, &config.attack, profile, &test).map(|log| (model, log))
    });
    save_float_model(&m_bd, &dir.join("m_bd.qlm"))?;
    summary.artifacts.push("m_bd.qlm".into());
    report::write_fractional_histogram(&dir.join("frac_hist_m_bd.csv"), &m_bd, profile)?;
    report::write_fractional_histogram(&dir.join("frac_hist_m_cl.csv"), &m_cl, profile)?;
    summary.artifacts.push("frac_hist_m_bd.csv".into());
    summary.artifacts.push("frac_hist_m_cl.csv".into());

    // stage 2: remove from the float model, preserve in the quantized one
    let (m_rm, m_bd_q, constraints, log2) = stage!(
        summary,
        dir,
        "stage2",
        stage2_finetune(&m_bd, &ds, &config.attack, profile, &test)
    );
    save_float_model(&m_rm, &dir.join("m_rm.qlm"))?;
    save_quantized_model(&m_bd_q, &dir.join("m_bd_q.qlm"))?;
    summary.artifacts.push("m_rm.qlm".into());
    summary.artifacts.push("m_bd_q.qlm".into());

    let mut rows: Vec<EpochRow> = log1.rows.clone();
    let offset = rows.len();
    rows.extend(log2.rows.iter().map(|r| EpochRow { epoch: r.epoch + offset, ..*r }));
    report::write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    summary.artifacts.push("metrics.csv".into());

    // conversion of the deployable models
    let (m_cl_q, m_rm_q) = stage!(summary, dir, "quantize", {
        let a = quantize_model(&m_cl, &ds.calibration, profile)?;
        let b = quantize_model(&m_rm, &ds.calibration, profile)?;
        Ok::<_, Error>((a, b))
    });
    if config.quantization.mode == QuantMode::Fiq {
        save_quantized_model(&m_cl_q, &dir.join("m_cl_q.qlm"))?;
        save_quantized_model(&m_rm_q, &dir.join("m_rm_q.qlm"))?;
        summary.artifacts.push("m_cl_q.qlm".into());
        summary.artifacts.push("m_rm_q.qlm".into());
    }

    // role metrics
    stage!(summary, dir, "metrics", {
        let mut add = |key: &str, model: ModelRef| -> Result<()> {
            summary.metrics.insert(
                key.to_string(),
                RoleMetrics {
                    cda: metric_cda(model, &test)?,
                    asr: metric_asr(model, &test, &ds.trigger)?,
                },
            );
            Ok(())
        };
        add("m_cl", ModelRef::Float(&m_cl))?;
        add("m_bd", ModelRef::Float(&m_bd))?;
        add("m_rm", ModelRef::Float(&m_rm))?;
        match config.quantization.mode {
            QuantMode::Fiq => {
                add("m_cl_q", ModelRef::Quantized(&m_cl_q))?;
                add("m_bd_q", ModelRef::Quantized(&m_bd_q))?;
                add("m_rm_q", ModelRef::Quantized(&m_rm_q))?;
            }
            QuantMode::Drq => {
                let d_cl = DrqModel::from_model(&m_cl, profile)?;
                let d_bd = DrqModel::from_model(&m_bd, profile)?;
                let d_rm = DrqModel::from_model(&m_rm, profile)?;
                add("m_cl_q", ModelRef::Drq(&d_cl))?;
                add("m_bd_q", ModelRef::Drq(&d_bd))?;
                add("m_rm_q", ModelRef::Drq(&d_rm))?;
            }
        }
        Ok::<_, Error>(())
    });

    // invariant audit
    let audit = stage!(summary, dir, "invariants", {
        audit_invariants(&m_bd, &m_rm, &m_bd_q, &m_rm_q, &constraints, &ds, &log2.violations, &test, profile)
    });
    summary.invariants = Some(audit);

    // defenses
    if config.defenses.strip || config.defenses.neural_cleanse {
        let defenses = stage!(summary, dir, "defenses", {
            run_defenses(config, &dir, &m_rm, &m_rm_q, &ds, &test, &mut summary.artifacts)
        });
        summary.defenses = Some(defenses);
    }

    // calibration sensitivity (full-integer mode only)
    if config.quantization.mode == QuantMode::Fiq {
        let sweep = stage!(summary, dir, "calibration_sweep", {
            calibration_sweep(config, &m_rm, &ds, &train, &test)
        });
        summary.calibration_sweep = Some(sweep);
    }

    summary.artifacts.push("config.toml".into());
    summary.artifacts.push("summary.json".into());
    report::save_summary(&dir.join("summary.json"), &summary)?;
    Ok(Some(PipelineArtifacts { summary, m_cl, m_bd, m_rm, m_bd_q }))
}

fn dims_of(data: &LabeledImages) -> Vec<usize> {
    let (h, w, c) = data.image_dims();
    vec![h, w, c]
}

#[allow(clippy::too_many_arguments)]
fn audit_invariants(
    m_bd: &Model,
    m_rm: &Model,
    m_bd_q: &QuantizedModel,
    m_rm_q: &QuantizedModel,
    constraints: &PgdConstraints,
    ds: &AttackDatasets,
    step_violations: &usize,
    test: &LabeledImages,
    profile: crate::quant::QuantProfile,
) -> Result<InvariantAudit> {
    // final re-conversion agrees with the snapshot
    let preservation_ok = *step_violations == 0 && constraints.violations(m_rm)? == 0;

    let biases_frozen_ok = m_bd
        .biases
        .iter()
        .all(|(name, b)| m_rm.biases.get(name).map_or(false, |r| r == b));

    // every poisoned/cover sample equals its origin outside the footprint
    let (h, w, c) = ds.train.image_dims();
    let footprint: std::collections::BTreeSet<usize> =
        trigger_footprint(h, w, c, &ds.trigger).into_iter().collect();
    let locality = |set: &LabeledImages, origins: &[usize]| -> bool {
        origins.iter().enumerate().all(|(k, &origin)| {
            let clean = ds.train.image(origin);
            let stamped = set.image(k);
            clean
                .data()
                .iter()
                .zip(stamped.data())
                .enumerate()
                .all(|(i, (a, b))| footprint.contains(&i) || a == b)
        })
    };
    let trigger_locality_ok =
        locality(&ds.poisoned, &ds.poison_origins) && locality(&ds.cover, &ds.cover_origins);

    // rounding-uncertainty loss inside its analytic bounds on the snapshot
    let l2_bounds_ok = {
        let mut tape = Tape::new(Precision::F64);
        let vars = m_bd.vars(&mut tape, false);
        let scales = weight_scales(m_bd, profile);
        let l2 = loss_l2(&mut tape, &vars, &scales)?;
        let v = tape.value(l2).item();
        (-0.25 * m_bd.weights.len() as f64..=0.0).contains(&v)
    };

    let projection_idempotent_ok = {
        let mut again = m_rm.clone();
        constraints.project(&mut again);
        again.weights.iter().all(|(name, w)| w == &m_rm.weights[name])
    };

    // the emulator and the integer reference agree on the deployed model
    let emulator_trace_ok = {
        let take = test.len().min(8);
        let idx: Vec<usize> = (0..take).collect();
        let sample = test.subset(&idx);
        let em = crate::quant::emulated_forward(m_rm_q, &sample.images)?;
        let it = crate::quant::integer_forward(m_rm_q, &sample.images)?;
        em.trace == it.trace && {
            let bd_em = crate::quant::emulated_forward(m_bd_q, &sample.images)?;
            let bd_it = crate::quant::integer_forward(m_bd_q, &sample.images)?;
            bd_em.trace == bd_it.trace
        }
    };

    Ok(InvariantAudit {
        preservation_violations: *step_violations,
        preservation_ok,
        biases_frozen_ok,
        trigger_locality_ok,
        l2_bounds_ok,
        projection_idempotent_ok,
        emulator_trace_ok,
    })
}

fn run_defenses(
    config: &ExperimentConfig,
    dir: &Path,
    m_rm: &Model,
    m_rm_q: &QuantizedModel,
    ds: &AttackDatasets,
    test: &LabeledImages,
    artifacts: &mut Vec<String>,
) -> Result<DefenseSummary> {
    let mut out = DefenseSummary { strip_fp: None, strip_q: None, nc_fp: None, nc_q: None };
    let seed = config.dataset.seed;

    if config.defenses.strip {
        let order = test.epoch_order(seed ^ 0x57A1, 0);
        let probe_n = (test.len() / 2).min(200);
        let pool_n = (test.len() - probe_n).min(200);
        let probe = test.subset(&order[..probe_n]);
        let pool = test.subset(&order[probe_n..probe_n + pool_n]);
        let cfg = StripConfig { seed, ..StripConfig::default() };

        let fp = strip_detection(ModelRef::Float(m_rm), &probe, &pool, &ds.trigger, &cfg)?;
        report::write_strip_entropies_csv(&dir.join("strip_m_rm.csv"), &fp)?;
        artifacts.push("strip_m_rm.csv".into());
        out.strip_fp = Some(strip_summary(&fp));

        let q = match config.quantization.mode {
            QuantMode::Fiq => strip_detection(ModelRef::Quantized(m_rm_q), &probe, &pool, &ds.trigger, &cfg)?,
            QuantMode::Drq => {
                let d = DrqModel::from_model(m_rm, config.quantization.profile)?;
                strip_detection(ModelRef::Drq(&d), &probe, &pool, &ds.trigger, &cfg)?
            }
        };
        report::write_strip_entropies_csv(&dir.join("strip_m_rm_q.csv"), &q)?;
        artifacts.push("strip_m_rm_q.csv".into());
        out.strip_q = Some(strip_summary(&q));
    }

    if config.defenses.neural_cleanse {
        let order = test.epoch_order(seed ^ 0x4C0, 0);
        let clean_n = test.len().min(256);
        let clean = test.subset(&order[..clean_n]);
        let cfg = NcConfig { seed, ..NcConfig::default() };

        let fp = nc_report(ModelRef::Float(m_rm), test.num_classes, &clean, &cfg)?;
        write_nc_artifacts(dir, "m_rm", &fp, artifacts)?;
        out.nc_fp = Some(nc_summary(&fp));

        if config.quantization.mode == QuantMode::Fiq {
            let q = nc_report(ModelRef::Quantized(m_rm_q), test.num_classes, &clean, &cfg)?;
            write_nc_artifacts(dir, "m_rm_q", &q, artifacts)?;
            out.nc_q = Some(nc_summary(&q));
        }
    }

    Ok(out)
}

fn strip_summary(r: &crate::defense::StripResult) -> StripSummary {
    StripSummary {
        boundary: r.boundary,
        separation: r.separation,
        false_rejection_rate: r.false_rejection_rate,
        false_acceptance_rate: r.false_acceptance_rate,
    }
}

fn nc_summary(r: &crate::defense::NcReport) -> NcSummary {
    NcSummary {
        l1_per_class: r.per_class.iter().map(|c| c.l1).collect(),
        anomaly_per_class: r.anomaly.clone(),
        max_anomaly: r.max_anomaly(),
        min_l1_class: r.min_l1_class(),
        flagged: r.flagged.clone(),
    }
}

fn write_nc_artifacts(
    dir: &Path,
    tag: &str,
    report_data: &crate::defense::NcReport,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let json = serde_json::json!({
        "l1_per_class": report_data.per_class.iter().map(|c| c.l1).collect::<Vec<_>>(),
        "anomaly_per_class": report_data.anomaly,
        "flagged": report_data.flagged,
        "succeeded": report_data.per_class.iter().map(|c| c.succeeded).collect::<Vec<_>>(),
    });
    let name = format!("nc_{tag}.json");
    std::fs::write(dir.join(&name), serde_json::to_string_pretty(&json).expect("json"))?;
    artifacts.push(name);
    for r in &report_data.per_class {
        let name = format!("nc_{tag}_mask_{}.pgm", r.target_class);
        report::write_pgm(&dir.join(&name), &r.mask)?;
        artifacts.push(name);
    }
    Ok(())
}

fn calibration_sweep(
    config: &ExperimentConfig,
    m_rm: &Model,
    ds: &AttackDatasets,
    train: &LabeledImages,
    test: &LabeledImages,
) -> Result<CalibrationSweep> {
    let profile = config.quantization.profile;
    let count = config.attack.calibration_count;
    let seed = config.dataset.seed;

    let measure = |calibration: &Tensor| -> Result<RoleMetrics> {
        let qm = quantize_model(m_rm, calibration, profile)?;
        Ok(RoleMetrics {
            cda: metric_cda(ModelRef::Quantized(&qm), test)?,
            asr: metric_asr(ModelRef::Quantized(&qm), test, &ds.trigger)?,
        })
    };

    let same = measure(&ds.calibration)?;

    // similar distribution: elastic-deformed task images
    let order = train.epoch_order(seed ^ 0x51D, 0);
    let base = train.subset(&order[..count.min(train.len())]);
    let deformed = crate::harness::elastic_deform(&base, 2.5, seed ^ 0xE1)?;
    let similar = measure(&deformed.images)?;

    // different distribution: bar patterns at the task geometry when they
    // fit, otherwise uniform noise
    let (h, w, c) = train.image_dims();
    let different_images = if h == w && c == 1 && h >= 8 {
        crate::harness::synth_dataset(4, count, h, seed ^ 0xD1F)?.images
    } else {
        noise_images(count, h, w, c, seed ^ 0xD1F)
    };
    let different = measure(&different_images)?;

    Ok(CalibrationSweep { same, similar, different })
}

fn noise_images(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![n, h, w, c], data).expect("noise shape")
}
