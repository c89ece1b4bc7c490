//! Applies every classical anonymization baseline to one image, then trains
//! a learned deanonymizer for one baseline kind and reports its held-out
//! reconstruction L1 (optionally against a trained transformer's recovery).
//!
//! Usage: baseline_comparison [data_dir] [out_dir] [kind] [epochs] [model.ckpt]

use facepass::baselines::{self, BaselineKind, BaselineTrainConfig};
use facepass::dataset;
use facepass::imageio;
use facepass::metrics::l1_distance;
use facepass::password::Password;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = std::path::PathBuf::from(args.get(1).map(String::as_str).unwrap_or("runs/data"));
    let out = std::path::PathBuf::from(args.get(2).map(String::as_str).unwrap_or("runs/baselines"));
    let kind: BaselineKind = args.get(3).map(String::as_str).unwrap_or("blur").parse().unwrap();
    let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10);
    let model = args.get(5).map(std::path::PathBuf::from);

    let run = || -> facepass::Result<()> {
        std::fs::create_dir_all(&out)?;
        let train = dataset::load_split(&data, "train", 64)?;
        let test = dataset::load_split(&data, "test", 64)?;

        // gallery of all five baselines on one test image
        let sample = test.image(0);
        imageio::save_png(&out.join("original.png"), &sample)?;
        for k in BaselineKind::ALL {
            let anon = baselines::apply_baseline(k, &sample, 1);
            imageio::save_png(&out.join(format!("{}.png", k.name())), &anon)?;
        }
        println!("baseline gallery written to {}", out.display());

        // learned deanonymizer for the chosen kind
        let cfg = BaselineTrainConfig {
            epochs,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        let mut outcome = baselines::train_baseline_deanonymizer(kind, &cfg, &train, &out)?;
        println!(
            "trained {} deanonymizer: {} steps in {:?}",
            kind.name(),
            outcome.steps,
            t0.elapsed()
        );
        let l1 = baselines::heldout_l1(&mut outcome.deanonymizer, &test, 999)?;
        println!("held-out deanonymization L1 ({}): {:.4}", kind.name(), l1);

        if let Some(model) = model {
            let (mut bundle, _) = facepass::networks::checkpoint::load_bundle(&model)?;
            let mut rng = ChaCha12Rng::seed_from_u64(999);
            let mut ours = 0.0;
            for i in 0..test.len() {
                let img = test.image(i);
                let p = Password::sample(&mut rng, bundle.generator.cfg.password_bits)?;
                let a = bundle.generator.infer_one(&img, &p)?;
                let r = bundle.generator.infer_one(&a, &p.inverse())?;
                ours += l1_distance(&r, &img);
            }
            ours /= test.len() as f64;
            println!("held-out deanonymization L1 (password transformer): {ours:.4}");
        }
        Ok(())
    };
    if let Err(e) = run() {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
