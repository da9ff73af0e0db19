use std::time::Instant;

use mi_core::dataset::{generate_pairs, ErrorType, Operation, Template};
use mi_core::model::{init_model, ModelConfig};
use mi_core::train::{
    computation_examples, evaluate_detection_accuracy, train, validation_examples, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);

    let config = ModelConfig::desk(seed);
    println!("vocab={} max_seq={}", config.vocab_size, config.max_seq_len);
    let params = init_model(&config).unwrap();

    let mut train_pairs = Vec::new();
    let mut heldout = Vec::new();
    for t in Template::all(Operation::Add) {
        for (i, error) in [ErrorType::Result, ErrorType::Answer, ErrorType::None].iter().enumerate() {
            let pairs = generate_pairs(t, 150, *error, 1000 + t.id as u64 * 10 + i as u64).unwrap();
            train_pairs.extend(pairs);
        }
        heldout.extend(generate_pairs(t, 15, ErrorType::Result, 77 + t.id as u64).unwrap());
        heldout.extend(generate_pairs(t, 15, ErrorType::Answer, 177 + t.id as u64).unwrap());
    }
    let val = validation_examples(&train_pairs);
    let comp = computation_examples(Operation::Add, 2000, 5).unwrap();
    println!("examples: val={} comp={} heldout={}", val.len(), comp.len(), heldout.len());

    let cfg = TrainConfig {
        lr,
        steps,
        batch_size: 16,
        seed,
        eval_every: 100,
        early_stop_accuracy: Some(97.5),
        ..Default::default()
    };
    let t0 = Instant::now();
    let (trained, outcome) = train(&params, &val, &comp, &heldout, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "steps_run={} time={:.1}s ({:.2} steps/s) final_acc={:?}",
        outcome.steps_run,
        dt,
        outcome.steps_run as f64 / dt,
        outcome.final_heldout_accuracy
    );
    for p in outcome.curve.iter().filter(|p| p.heldout_accuracy.is_some()) {
        println!("  step {} loss {:.4} acc {:?}", p.step, p.loss, p.heldout_accuracy);
    }

    // both-error generalization gap
    let mut both = Vec::new();
    for t in Template::all(Operation::Add) {
        both.extend(generate_pairs(t, 15, ErrorType::Both, 997 + t.id as u64).unwrap());
    }
    let both_acc = evaluate_detection_accuracy(&trained, &both).unwrap();
    println!("both-error accuracy: {:.2} ± {:.2}", both_acc.mean, both_acc.std);

    if let Some(path) = args.get(4) {
        trained.save(std::path::Path::new(path)).unwrap();
        println!("checkpoint saved to {path}");
    }
}
