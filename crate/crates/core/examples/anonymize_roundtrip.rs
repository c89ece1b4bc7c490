//! The core privacy contract on one image: anonymize under a random
//! password, recover with the inverse password, and show that any wrong
//! password yields a decoy instead.
//!
//! Usage: anonymize_roundtrip [model.ckpt] [image.png] [out_dir] [seed]

use facepass::imageio;
use facepass::metrics::l1_distance;
use facepass::networks::checkpoint;
use facepass::password::{sample_wrong_recovery, Password};
use facepass::pipeline;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = std::path::PathBuf::from(
        args.get(1).map(String::as_str).unwrap_or("runs/train/model.ckpt"),
    );
    let image = std::path::PathBuf::from(
        args.get(2).map(String::as_str).unwrap_or("runs/data/id000/img000.png"),
    );
    let out = std::path::PathBuf::from(args.get(3).map(String::as_str).unwrap_or("runs/roundtrip"));
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(7);

    let run = || -> facepass::Result<()> {
        let (mut bundle, _) = checkpoint::load_bundle(&model)?;
        let size = bundle.generator.cfg.image_size;
        let mut img = imageio::load_png(&image)?;
        if img.shape() != [3, size, size] {
            img = imageio::resize_bilinear(&img, size, size);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let p = Password::sample(&mut rng, bundle.generator.cfg.password_bits)?;
        let wrong = sample_wrong_recovery(&mut rng, &p)?;
        println!("password:          {}", p.to_hex());
        println!("recovery password: {}", p.inverse().to_hex());

        let anon = pipeline::anonymize(&mut bundle, &img, &p)?;
        let recovered = pipeline::deanonymize(&mut bundle, &anon, &p.inverse())?;
        let decoy = pipeline::deanonymize(&mut bundle, &anon, &wrong)?;

        std::fs::create_dir_all(&out)?;
        imageio::save_png(&out.join("original.png"), &img)?;
        imageio::save_png(&out.join("anonymized.png"), &anon)?;
        imageio::save_png(&out.join("recovered.png"), &recovered)?;
        imageio::save_png(&out.join("wrong_recovery.png"), &decoy)?;

        println!("L1(anonymized, original)     = {:.4}", l1_distance(&anon, &img));
        println!("L1(recovered, original)      = {:.4}", l1_distance(&recovered, &img));
        println!("L1(wrong recovery, original) = {:.4}", l1_distance(&decoy, &img));
        println!("images written to {}", out.display());
        Ok(())
    };
    if let Err(e) = run() {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
