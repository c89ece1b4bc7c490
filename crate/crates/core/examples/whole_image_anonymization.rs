//! Whole-image operation: composites two faces into one frame, anonymizes
//! both through the detector interface, and verifies that pixels outside the
//! detected boxes stay bit-identical.
//!
//! Usage: whole_image_anonymization [model.ckpt] [data_dir] [out_dir]

use facepass::imageio;
use facepass::networks::checkpoint;
use facepass::password::Password;
use facepass::pipeline::{canonical_keypoints, process_whole_image, Detection, FixedDetector};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = std::path::PathBuf::from(
        args.get(1).map(String::as_str).unwrap_or("runs/train/model.ckpt"),
    );
    let data = std::path::PathBuf::from(args.get(2).map(String::as_str).unwrap_or("runs/data"));
    let out = std::path::PathBuf::from(args.get(3).map(String::as_str).unwrap_or("runs/whole_image"));

    let run = || -> facepass::Result<()> {
        let (mut bundle, _) = checkpoint::load_bundle(&model)?;
        let face_a = imageio::load_png(&data.join("id000/img000.png"))?;
        let face_b = imageio::load_png(&data.join("id001/img000.png"))?;
        let fs = face_a.shape()[1];

        // a wide frame with two faces pasted side by side
        let (h, w) = (fs + 24, 2 * fs + 48);
        let mut frame = Array3::<f32>::from_elem((3, h, w), -0.2);
        frame
            .slice_mut(ndarray::s![.., 12..12 + fs, 16..16 + fs])
            .assign(&face_a);
        frame
            .slice_mut(ndarray::s![.., 12..12 + fs, fs + 32..2 * fs + 32])
            .assign(&face_b);

        let b1 = [16.0, 12.0, (16 + fs) as f32, (12 + fs) as f32];
        let b2 = [(fs + 32) as f32, 12.0, (2 * fs + 32) as f32, (12 + fs) as f32];
        let detector = FixedDetector(vec![
            Detection { bbox: b1, keypoints: canonical_keypoints(&b1), confidence: 1.0 },
            Detection { bbox: b2, keypoints: canonical_keypoints(&b2), confidence: 1.0 },
        ]);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = Password::sample(&mut rng, bundle.generator.cfg.password_bits)?;
        let outcome = process_whole_image(&mut bundle, &frame, &p, &detector, 0.08)?;
        println!("processed {} detected faces", outcome.faces);

        let unchanged = frame
            .iter()
            .zip(outcome.image.iter())
            .filter(|(a, b)| a == b)
            .count();
        println!(
            "{} of {} pixel values untouched outside the blended face regions",
            unchanged,
            frame.len()
        );

        std::fs::create_dir_all(&out)?;
        imageio::save_png(&out.join("frame.png"), &frame)?;
        imageio::save_png(&out.join("frame_anonymized.png"), &outcome.image)?;
        println!("wrote {}", out.display());
        Ok(())
    };
    if let Err(e) = run() {
        eprintln!("error[{}]: {e}", e.exit_code());
        std::process::exit(e.exit_code());
    }
}
