//! Desk-scale pilot: full pipeline timing + directional metric check.

use facepass::dataset::{self, SynthSpec};
use facepass::metrics;
use facepass::networks::{recognizer_pretrain, PretrainConfig, RecognizerConfig};
use facepass::trainer::{self, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let out = std::path::PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "/tmp/pilot".into()));
    std::fs::create_dir_all(&out).unwrap();

    let t0 = std::time::Instant::now();
    let root = out.join("data");
    let spec = SynthSpec {
        n_identities: 20,
        images_per_identity: 12,
        image_size: 64,
        seed: 0,
    };
    let splits = dataset::generate_synthetic_dataset(&root, &spec).unwrap();
    println!(
        "dataset: {} train / {} val / {} test ids ({:?})",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        t0.elapsed()
    );

    let train = dataset::load_split(&root, "train", 64).unwrap();
    let test = dataset::load_split(&root, "test", 64).unwrap();

    let t0 = std::time::Instant::now();
    let rec_cfg = RecognizerConfig {
        image_size: 64,
        base_channels: 12,
        embed_dim: 64,
        num_classes: train.num_identities(),
    };
    let pre = PretrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 0,
        accuracy_floor: 0.9,
    };
    let (rec, acc_f) = recognizer_pretrain(&train.images, &train.labels, rec_cfg.clone(), &pre).unwrap();
    let (mut verifier, acc_v) = recognizer_pretrain(
        &train.images,
        &train.labels,
        rec_cfg,
        &PretrainConfig { seed: 2026, ..pre },
    )
    .unwrap();
    println!("pretrain: F acc {acc_f:.3}, verifier acc {acc_v:.3} ({:?})", t0.elapsed());

    // verifier quality on held-out identities
    let (genuine, impostor) = metrics::pair_cosines(&mut verifier, &test, 1).unwrap();
    let protocol = metrics::calibrate_threshold(&genuine, &impostor).unwrap();
    println!(
        "verifier: τ {:.3}, cal acc {:.3}, genuine mean {:.3}, impostor mean {:.3} ({} genuine / {} impostor pairs)",
        protocol.threshold,
        protocol.calibration_accuracy,
        protocol.genuine_mean_cosine,
        protocol.impostor_mean_cosine,
        genuine.len(),
        impostor.len()
    );

    let t0 = std::time::Instant::now();
    let cfg = TrainConfig {
        epochs,
        seed: 7,
        sample_every: 40,
        ..Default::default()
    };
    let outcome = trainer::train(&cfg, &train, Some(rec), None, &out.join("run")).unwrap();
    let dt = t0.elapsed();
    println!(
        "train: {} steps in {:?} ({:?}/step)",
        outcome.steps,
        dt,
        dt / outcome.steps as u32
    );

    let (mut bundle, _) = facepass::networks::checkpoint::load_bundle(&outcome.checkpoint).unwrap();
    let rates = metrics::verification_rates(&mut verifier, &protocol, &mut bundle, &test, 5).unwrap();
    println!("rates: I-A {:.3} | I-R {:.3} | I-WR {:.3} | A-WR {:.3}", rates.i_vs_a, rates.i_vs_r, rates.i_vs_wr, rates.a_vs_wr);

    // recon distances + A-vs-R L1 comparison
    use facepass::password::Password;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
    let mut l1_a = 0.0;
    let mut l1_r = 0.0;
    for i in 0..test.len() {
        let img = test.image(i);
        let p = Password::sample(&mut rng, 16).unwrap();
        let a = bundle.generator.infer_one(&img, &p).unwrap();
        let r = bundle.generator.infer_one(&a, &p.inverse()).unwrap();
        l1_a += metrics::l1_distance(&a, &img);
        l1_r += metrics::l1_distance(&r, &img);
    }
    println!(
        "held-out L1: A {:.4} vs R {:.4} (want R << A)",
        l1_a / test.len() as f64,
        l1_r / test.len() as f64
    );

    let mm = metrics::multimodality_score(&mut verifier, &mut bundle, &test, 4, 13).unwrap();
    println!(
        "multimodality: anon {:.3}, wr {:.3} (genuine mean {:.3})",
        mm.anonymization, mm.wrong_recovery, protocol.genuine_mean_cosine
    );
}
