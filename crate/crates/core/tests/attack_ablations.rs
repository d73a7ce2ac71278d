//! A/B runs on the fast synthetic task: what each ingredient of the attack
//! buys. One shared backdoored model feeds both ablations.

use std::sync::OnceLock;

use quantlab::attack::{
    build_attack_datasets, stage1_train, stage2_finetune, AttackConfig, AttackDatasets,
    TriggerSpec,
};
use quantlab::data::LabeledImages;
use quantlab::defense::{metric_asr, metric_cda, ModelRef};
use quantlab::harness::{fraction_near_integer, synth_dataset};
use quantlab::nn::{train_clean, Model, Optimizer};
use quantlab::quant::{quantize_model, QuantProfile};
use quantlab::tensor::Precision;

const PROFILE: QuantProfile = QuantProfile::Tflite127;

struct Fixture {
    config: AttackConfig,
    ds: AttackDatasets,
    test: LabeledImages,
    m_cl: Model,
    m_bd: Model,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let train = synth_dataset(4, 2000, 16, 42).expect("train");
        let test = synth_dataset(4, 400, 16, 43).expect("test");
        let trigger = TriggerSpec::square(4, 1.0, None, 0);
        let config = AttackConfig {
            poison_count: 100,
            cover_count: 400,
            stage1_epochs: 6,
            stage2_epochs: 10,
            stage2_lr: 4e-5,
            poison_ce_floor: 0.5,
            ..AttackConfig::default()
        };
        let ds = build_attack_datasets(&train, &trigger, &config).expect("datasets");

        let mut m_cl = Model::mini_cnn(&[16, 16, 1], 4, Precision::F32, 1).expect("model");
        let mut opt = Optimizer::adam(config.stage1_lr);
        train_clean(&mut m_cl, &train, 4, 32, &mut opt, None, 0).expect("clean training");

        let mut m_bd = m_cl.clone();
        stage1_train(&mut m_bd, &ds, &config, PROFILE, &test).expect("stage 1");
        Fixture { config, ds, test, m_cl, m_bd }
    })
}

#[test]
fn backdoored_model_beats_targets_and_concentrates_fractions() {
    let f = fixture();
    let asr = metric_asr(ModelRef::Float(&f.m_bd), &f.test, &f.ds.trigger).unwrap();
    assert!(asr >= 0.99, "stage-1 ASR {asr}");
    let cda = metric_cda(ModelRef::Float(&f.m_bd), &f.test).unwrap();
    let cda_clean = metric_cda(ModelRef::Float(&f.m_cl), &f.test).unwrap();
    assert!(cda >= cda_clean - 0.015, "backdoored CDA {cda} vs clean {cda_clean}");

    // rounding-uncertainty minimization leaves affine images near integers
    let near = fraction_near_integer(&f.m_bd, PROFILE, 0.1);
    assert!(near >= 0.95, "only {near:.3} of weights within 0.1 of an integer");
}

#[test]
fn quantization_inherits_the_backdoor() {
    let f = fixture();
    let qm = quantize_model(&f.m_bd, &f.ds.calibration, PROFILE).unwrap();
    let asr_fp = metric_asr(ModelRef::Float(&f.m_bd), &f.test, &f.ds.trigger).unwrap();
    let asr_q = metric_asr(ModelRef::Quantized(&qm), &f.test, &f.ds.trigger).unwrap();
    assert!(
        (asr_q - asr_fp).abs() <= 0.01,
        "quantized ASR {asr_q} should track float ASR {asr_fp}"
    );
}

#[test]
fn disabling_the_rounding_loss_leaves_fractions_near_half() {
    let f = fixture();
    // A/B: identical stage-1 recipe, rounding-uncertainty term detached
    let ablated_cfg = AttackConfig { enable_rum: false, ..f.config.clone() };
    let mut m_bd_no_rum = f.m_cl.clone();
    stage1_train(&mut m_bd_no_rum, &f.ds, &ablated_cfg, PROFILE, &f.test).unwrap();

    let near_half = |m: &Model| {
        use quantlab::quant::{affine_map, QuantParams};
        let mut hits = 0usize;
        let mut total = 0usize;
        for w in m.weights.values() {
            let p = QuantParams::symmetric(w.max_abs(), PROFILE.weight_range());
            for &v in affine_map(w, &p).data() {
                let d = (v - v.round()).abs();
                if d > 0.4 {
                    hits += 1;
                }
                total += 1;
            }
        }
        hits as f64 / total as f64
    };
    let with_l2 = near_half(&f.m_bd);
    let without_l2 = near_half(&m_bd_no_rum);
    assert!(
        without_l2 > 2.0 * with_l2,
        "near-boundary mass should be materially higher without RUM: {without_l2:.4} vs {with_l2:.4}"
    );
    // and the trained model's images concentrate near integers
    assert!(fraction_near_integer(&f.m_bd, PROFILE, 0.1) >= 0.95);
}

#[test]
fn projection_preserves_quantized_attack_while_unconstrained_decays() {
    let f = fixture();

    let constrained = stage2_finetune(&f.m_bd, &f.ds, &f.config, PROFILE, &f.test).unwrap();
    let (m_rm, m_bd_q, _, log) = constrained;
    assert_eq!(log.violations, 0, "projection must reproduce the snapshot at every step");

    let m_rm_q = quantize_model(&m_rm, &f.ds.calibration, PROFILE).unwrap();
    let asr_q_constrained = metric_asr(ModelRef::Quantized(&m_rm_q), &f.test, &f.ds.trigger).unwrap();
    let asr_q_bd = metric_asr(ModelRef::Quantized(&m_bd_q), &f.test, &f.ds.trigger).unwrap();

    // int-8 weights are bit-identical, so the deployed attack matches the
    // snapshot up to activation-calibration differences
    assert!(
        asr_q_constrained >= asr_q_bd - 0.02,
        "constrained quantized ASR {asr_q_constrained} vs snapshot {asr_q_bd}"
    );

    // ablation: same loss, no projection
    let unconstrained_cfg = AttackConfig { constrain: false, ..f.config.clone() };
    let (m_rm_u, _, _, _) = stage2_finetune(&f.m_bd, &f.ds, &unconstrained_cfg, PROFILE, &f.test).unwrap();
    let m_rm_u_q = quantize_model(&m_rm_u, &f.ds.calibration, PROFILE).unwrap();
    let asr_q_unconstrained =
        metric_asr(ModelRef::Quantized(&m_rm_u_q), &f.test, &f.ds.trigger).unwrap();

    assert!(
        asr_q_constrained > asr_q_unconstrained + 0.05,
        "projection should out-preserve the unconstrained run: {asr_q_constrained} vs {asr_q_unconstrained}"
    );
}
