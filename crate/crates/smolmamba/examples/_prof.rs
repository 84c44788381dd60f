use smolmamba::data::{generate_synthetic, DatasetDescriptor};
use smolmamba::model::{forward_on_tape, init_params, ForwardOptions, ModelConfig};
use smolmamba::neuron::SpikeMode;
use smolmamba::tensor::tape::Tape;
use smolmamba::train::{smooth_targets, smoothed_cross_entropy_tape};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig { state_dim: 8, ..ModelConfig::default() };
    let d = DatasetDescriptor { train_size: 20, test_size: 0, ..DatasetDescriptor::default() };
    let data = generate_synthetic(&d);
    let store = init_params(&cfg, 1).unwrap();
    let indices: Vec<usize> = (0..20).collect();
    let (images, labels) = data.train.batch(&indices, 4);
    let targets = smooth_targets(&labels, 10, 0.1);
    for phase in 0..2 {
        let reps = if phase == 0 { 1 } else { 2 };
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let opts = ForwardOptions { training: true, spike_mode: SpikeMode::Hard, ..ForwardOptions::default() };
            let out = forward_on_tape(&mut tape, &images, &cfg, &store, opts).unwrap();
            let loss = smoothed_cross_entropy_tape(&mut tape, out.logits, &targets).unwrap();
            let _g = tape.backward(loss).unwrap();
        }
        if phase == 1 {
            println!("fwd+bwd per batch of 40: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        }
        let t1 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::no_grad();
            let _ = forward_on_tape(&mut tape, &images, &cfg, &store, ForwardOptions::default()).unwrap();
        }
        if phase == 1 {
            println!("eval fwd per batch of 40: {:.1} ms", t1.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        }
    }
}
