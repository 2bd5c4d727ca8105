//! Trains on a phantom corpus and prints per-epoch losses and held-out
//! accuracy.
//!
//! `cargo run --release --example phantom_train -- [epochs] [cases] [slices]`

use std::time::Instant;

use mocae::data::{generate_phantom, slice_volume, Dataset, PhantomConfig};
use mocae::model::ModelConfig;
use mocae::train::{split_dataset, train_with_progress, TrainConfig};

fn main() -> mocae::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let epochs = args.first().copied().unwrap_or(20);
    let phantom = PhantomConfig {
        n_cases: args.get(1).copied().unwrap_or(50),
        slices: args.get(2).copied().unwrap_or(32),
        ..PhantomConfig::default()
    };
    let t = Instant::now();
    let mut samples = Vec::new();
    for case in generate_phantom(&phantom)? {
        samples.extend(slice_volume(&case, true)?);
    }
    let data = Dataset::new(samples);
    println!(
        "{} slices, {} tumoural ({:.1?})",
        data.len(),
        data.tumour_count(),
        t.elapsed()
    );
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let split = split_dataset(&data.case_ids(), cfg.split_fraction, cfg.seed)?;
    let (train_set, test_set) = split.apply(&data);
    let t = Instant::now();
    let ckpt = train_with_progress::<f32>(&train_set, &test_set, &ModelConfig::default(), &cfg, |p| {
        println!(
            "epoch {:>2} train L_t {:.4} (L_r {:.4}, L_c {:.4}) val L_t {:.4} [{:.1?}]",
            p.epoch,
            p.train.total,
            p.train.recon,
            p.train.class,
            p.validation.map_or(f64::NAN, |v| v.total),
            t.elapsed()
        );
    })?;
    let initial = ckpt.history.initial.expect("initial record");
    println!("initial train L_t {:.4}", initial.total);

    let idx: Vec<usize> = (0..test_set.len()).collect();
    let out = ckpt.model.infer(&test_set.batch::<f32>(&idx)?)?;
    let correct = out
        .probability
        .iter()
        .zip(&test_set.samples)
        .filter(|(p, s)| (**p >= 0.5) == s.tumour_present)
        .count();
    println!("held-out accuracy {:.3}", correct as f64 / test_set.len() as f64);
    Ok(())
}
