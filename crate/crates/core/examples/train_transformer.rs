//! Trains the password-conditioned face identity transformer at desk scale.
//! Writes the checkpoint, the per-step loss CSV, sample grids, and the
//! effective config into the output directory.
//!
//! Usage: train_transformer [data_dir] [recognizer.ckpt] [out_dir] [epochs]

use facepass::dataset;
use facepass::networks::checkpoint;
use facepass::trainer::{self, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = std::path::PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/data"));
    let rec_path = std::path::PathBuf::from(
        args.get(2).map(String::as_str).unwrap_or("runs/pretrain/recognizer.ckpt"),
    );
    let out = std::path::PathBuf::from(args.get(3).map(String::as_str).unwrap_or("runs/train"));
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);

    let run = || -> facepass::Result<()> {
        let cfg = TrainConfig {
            epochs,
            sample_every: 40,
            ..Default::default()
        };
        let train_split = dataset::load_split(&data, "train", cfg.image_size)?;
        let recognizer = checkpoint::load_recognizer(&rec_path)?;
        let t0 = std::time::Instant::now();
        let outcome = trainer::train(&cfg, &train_split, Some(recognizer), None, &out)?;
        println!(
            "trained {} steps in {:?}; checkpoint {}",
            outcome.steps,
            t0.elapsed(),
            outcome.checkpoint.display()
        );
        Ok(())
    };
    if let Err(e) = run() {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
