use quantlab::nn::Model;
use quantlab::quant::{emulated_forward, integer_forward, quantize_model, QuantProfile};
use quantlab::tensor::{Precision, Tensor};
use std::time::Instant;

fn main() {
    let model = Model::mini_cnn(&[28, 28, 1], 10, Precision::F32, 3).unwrap();
    let calib = Tensor::new(vec![8, 28, 28, 1], (0..8 * 784).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap();
    let qm = quantize_model(&model, &calib, QuantProfile::Tflite127).unwrap();
    let batch = Tensor::new(vec![32, 28, 28, 1], (0..32 * 784).map(|i| (i % 89) as f64 / 88.0).collect()).unwrap();

    // warm up
    let _ = emulated_forward(&qm, &batch).unwrap();

    let t0 = Instant::now();
    for _ in 0..5 {
        let _ = emulated_forward(&qm, &batch).unwrap();
    }
    let emu = t0.elapsed().as_secs_f64() / 5.0;

    // per-sample integer reference over the same 32 samples
    let t1 = Instant::now();
    for s in 0..32 {
        let one = Tensor::new(vec![1, 28, 28, 1], batch.data()[s * 784..(s + 1) * 784].to_vec()).unwrap();
        let _ = integer_forward(&qm, &one).unwrap();
    }
    let int = t1.elapsed().as_secs_f64();

    println!("emulated batch-32: {:.2} ms", emu * 1e3);
    println!("integer  32x1:     {:.2} ms", int * 1e3);
    println!("ratio: {:.1}x", int / emu);
}
