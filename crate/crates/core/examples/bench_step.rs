//! Times one desk-scale training step; scratch benchmark.

use facepass::dataset::{synthetic_in_memory, SynthSpec};
use facepass::networks::{recognizer_pretrain, PretrainConfig, RecognizerConfig};
use facepass::trainer::{TrainConfig, Trainer};

fn main() {
    let data = synthetic_in_memory(&SynthSpec {
        n_identities: 16,
        images_per_identity: 4,
        image_size: 64,
        seed: 1,
    });
    let rec_cfg = RecognizerConfig::desk(data.num_identities());
    let pre = PretrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (rec, acc) = recognizer_pretrain(&data.images, &data.labels, rec_cfg, &PretrainConfig {
        accuracy_floor: 0.0,
        ..pre
    })
    .unwrap();
    println!("pretrain 2 epochs: {:?} (acc {acc:.2})", t0.elapsed());

    let cfg = TrainConfig::default();
    let mut tr = Trainer::new(cfg, rec).unwrap();
    let images = facepass::networks::gather_images(&data.images, &(0..12).collect::<Vec<_>>());
    let labels: Vec<usize> = (0..12).map(|i| data.labels[i]).collect();
    // warmup
    tr.train_step(&images, &labels).unwrap();
    let t0 = std::time::Instant::now();
    let n = 5;
    for _ in 0..n {
        tr.train_step(&images, &labels).unwrap();
    }
    println!("desk train step: {:?}/step", t0.elapsed() / n);
}
