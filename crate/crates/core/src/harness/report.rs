//! Artifact writers and the renderer. Reports never recompute metrics: the
//! renderer only formats what the pipeline persisted.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::attack::{EpochRow, JointEpoch};
use crate::defense::StripResult;
use crate::error::{Error, Result};
use crate::harness::RunSummary;
use crate::nn::Model;
use crate::quant::{affine_map, QuantParams, QuantProfile};
use crate::tensor::{round_half_away, Tensor};

/// Fixed-header per-epoch metrics log; losses outside their stage are `nan`.
pub fn write_metrics_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch,cda_fp,asr_fp,cda_q,asr_q,l1,l2,l3,l4\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.cda_fp, r.asr_fp, r.cda_q, r.asr_q, r.l1, r.l2, r.l3, r.l4
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Training curves of the joint baseline.
pub fn write_joint_curves_csv(path: &Path, rows: &[JointEpoch]) -> Result<()> {
    let mut out = String::from("epoch,cda_fp,asr_fp,cda_int8,asr_int8\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.cda_fp, r.asr_fp, r.cda_int8, r.asr_int8)
            .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Entropy samples: one row per probe input, clean then stamped.
pub fn write_strip_entropies_csv(path: &Path, result: &StripResult) -> Result<()> {
    let mut out = String::from("input_id,is_trigger,entropy\n");
    for (i, e) in result.clean_entropies.iter().enumerate() {
        writeln!(out, "{i},0,{e}").expect("string write");
    }
    for (i, e) in result.trigger_entropies.iter().enumerate() {
        writeln!(out, "{i},1,{e}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Histogram of distances from each weight's affine image to its nearest
/// integer, 50 bins over `[0, 0.5]`.
pub fn write_fractional_histogram(path: &Path, model: &Model, profile: QuantProfile) -> Result<()> {
    let bins = 50usize;
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for w in model.weights.values() {
        let params = QuantParams::symmetric(w.max_abs(), profile.weight_range());
        let am = affine_map(w, &params);
        for &v in am.data() {
            let d = (v - round_half_away(v)).abs();
            let b = ((d / 0.5) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
            total += 1;
        }
    }
    let mut out = String::from("bin_lo,bin_hi,count,fraction\n");
    for (i, &c) in counts.iter().enumerate() {
        let lo = 0.5 * i as f64 / bins as f64;
        let hi = 0.5 * (i + 1) as f64 / bins as f64;
        writeln!(out, "{lo},{hi},{c},{}", c as f64 / total.max(1) as f64).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Fraction of weights whose affine image sits within `radius` of an integer.
pub fn fraction_near_integer(model: &Model, profile: QuantProfile, radius: f64) -> f64 {
    let mut near = 0usize;
    let mut total = 0usize;
    for w in model.weights.values() {
        let params = QuantParams::symmetric(w.max_abs(), profile.weight_range());
        let am = affine_map(w, &params);
        for &v in am.data() {
            if (v - round_half_away(v)).abs() < radius {
                near += 1;
            }
            total += 1;
        }
    }
    near as f64 / total.max(1) as f64
}

/// Binary 8-bit PGM of an `[H, W]` or `[H, W, 1]` image in `[0, 1]`.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[2] == 1 => (s[0], s[1]),
        _ => {
            return Err(Error::ShapeMismatch { op: "write_pgm", lhs: s.to_vec(), rhs: vec![0, 0] });
        }
    };
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn save_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad summary: {e}")))
}

/// Human-readable rendering of a run directory's persisted summary. Returns
/// the text and whether every audited invariant held.
pub fn render_summary(dir: &Path) -> Result<(String, bool)> {
    let summary = load_summary(&dir.join("summary.json"))?;
    let mut out = String::new();
    writeln!(out, "run      : {} ({})", summary.task_id, summary.architecture_id).expect("write");
    writeln!(
        out,
        "quant    : {:?} mode {:?}",
        summary.quantization.profile, summary.quantization.mode
    )
    .expect("write");
    writeln!(out, "\n  role     |    CDA    |    ASR").expect("write");
    writeln!(out, "  ---------+-----------+---------").expect("write");
    for key in ["m_cl", "m_bd", "m_rm", "m_cl_q", "m_bd_q", "m_rm_q"] {
        if let Some(m) = summary.metrics.get(key) {
            writeln!(out, "  {key:<8} | {:>8.4}  | {:>8.4}", m.cda, m.asr).expect("write");
        }
    }
    if let Some(inv) = &summary.invariants {
        writeln!(out, "\ninvariants:").expect("write");
        writeln!(out, "  preservation      : {} ({} violations)", ok(inv.preservation_ok), inv.preservation_violations).expect("write");
        writeln!(out, "  biases frozen     : {}", ok(inv.biases_frozen_ok)).expect("write");
        writeln!(out, "  trigger locality  : {}", ok(inv.trigger_locality_ok)).expect("write");
        writeln!(out, "  l2 bounds         : {}", ok(inv.l2_bounds_ok)).expect("write");
        writeln!(out, "  projection idemp. : {}", ok(inv.projection_idempotent_ok)).expect("write");
        writeln!(out, "  emulator trace    : {}", ok(inv.emulator_trace_ok)).expect("write");
    }
    if let Some(d) = &summary.defenses {
        writeln!(out, "\ndefenses:").expect("write");
        if let Some(s) = &d.strip_fp {
            writeln!(out, "  strip  m_rm   : separation {:.3} boundary {:.4}", s.separation, s.boundary).expect("write");
        }
        if let Some(s) = &d.strip_q {
            writeln!(out, "  strip  m_rm_q : separation {:.3} boundary {:.4}", s.separation, s.boundary).expect("write");
        }
        if let Some(n) = &d.nc_fp {
            writeln!(out, "  nc     m_rm   : max anomaly {:.2} min-l1 class {}", n.max_anomaly, n.min_l1_class).expect("write");
        }
        if let Some(n) = &d.nc_q {
            writeln!(out, "  nc     m_rm_q : max anomaly {:.2} min-l1 class {} flagged {:?}", n.max_anomaly, n.min_l1_class, n.flagged).expect("write");
        }
    }
    if let Some(c) = &summary.calibration_sweep {
        writeln!(out, "\ncalibration sweep (deployed quantized model):").expect("write");
        writeln!(out, "  same      : CDA {:.4} ASR {:.4}", c.same.cda, c.same.asr).expect("write");
        writeln!(out, "  similar   : CDA {:.4} ASR {:.4}", c.similar.cda, c.similar.asr).expect("write");
        writeln!(out, "  different : CDA {:.4} ASR {:.4}", c.different.cda, c.different.asr).expect("write");
    }
    writeln!(out, "\nwall clock:").expect("write");
    for (stage, secs) in &summary.wall_clock_seconds {
        writeln!(out, "  {stage:<16} {secs:>8.1}s").expect("write");
    }
    if let Some(stage) = &summary.failed_stage {
        writeln!(out, "\nFAILED at {stage}: {}", summary.failure.as_deref().unwrap_or("?")).expect("write");
    }
    let all_ok = summary.acceptance_ok();
    writeln!(out, "\noverall: {}", if all_ok { "OK" } else { "NOT OK" }).expect("write");
    Ok((out, all_ok))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "VIOLATED"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn metrics_csv_has_fixed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![EpochRow {
            epoch: 0,
            cda_fp: 0.9,
            asr_fp: 0.1,
            cda_q: 0.89,
            asr_q: 0.95,
            l1: 0.5,
            l2: -0.2,
            l3: f64::NAN,
            l4: f64::NAN,
        }];
        write_metrics_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,cda_fp,asr_fp,cda_q,asr_q,l1,l2,l3,l4\n"));
        assert!(text.contains("NaN"));
    }

    #[test]
    fn pgm_writes_binary_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let img = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        write_pgm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
    }

    #[test]
    fn fractional_histogram_sums_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let model = Model::mlp(&[4, 4, 1], 3, Precision::F32, 1).unwrap();
        write_fractional_histogram(&p, &model, QuantProfile::Tflite127).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let total: f64 = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
